#include "imdiff/reference_data.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace imdiff {

CosineFieldSpec CosineFieldSpec::sample(int nw, std::uint64_t seed, bool steady) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> amp(-2.0, 2.0), wav(0.0, 2.0), freq(-1.0, 1.0), ph(0.0, 2.0);
  CosineFieldSpec spec;
  spec.seed = seed;
  for (int i = 0; i < nw; ++i) {
    Wave w;
    w.amplitude = amp(rng);
    w.kx = wav(rng);
    w.ky = wav(rng);
    w.omega = freq(rng);
    w.phase = ph(rng);
    if (steady) w.omega = 0.0;
    spec.waves.push_back(w);
  }
  return spec;
}

double CosineFieldSpec::operator()(double x, double y, double t) const {
  double f = 0.0;
  for (const auto& w : waves) f += w.amplitude * std::sin(2.0 * std::numbers::pi * (w.kx * x + w.ky * y + w.omega * t) + w.phase);
  return f;
}

double CosineFieldSpec::bound() const {
  double b = 0.0;
  for (const auto& w : waves) b += std::abs(w.amplitude);
  return b;
}

Vector sample_cosine_field(const CosineFieldSpec& spec, const Grid2D& grid, double t) {
  Vector v(grid.cells());
  for (Index j = 0; j < grid.ny(); ++j)
    for (Index i = 0; i < grid.nx(); ++i) v[grid.index(i, j)] = spec(grid.x(i), grid.y(j), t);
  return v;
}

double gp_kernel(const GpIcSpec& spec, double lx, double ly, double dx, double dy) {
  const double l2 = spec.length_scale * spec.length_scale;
  auto axis = [&](double d, double period) {
    const double s = std::sin(std::numbers::pi * d / period);
    return period * period * s * s / (2.0 * std::numbers::pi * std::numbers::pi * l2);
  };
  return spec.variance * std::exp(-axis(dx, lx) - axis(dy, ly));
}

Vector sample_gp_coarse(const GpIcSpec& spec, double lx, double ly) {
  const Index cx = spec.coarse_nx, cy = spec.coarse_ny, n = cx * cy;
  if (cx < 1 || cy < 1) throw std::invalid_argument("sample_gp_ic: coarse grid must be non-empty");
  if (!(spec.length_scale > 0.0)) throw std::invalid_argument("sample_gp_ic: length scale must be positive");
  const double hx = lx / static_cast<double>(cx), hy = ly / static_cast<double>(cy);
  Matrix K(n, n);
  for (Index a = 0; a < n; ++a)
    for (Index b = 0; b < n; ++b)
      K(a, b) = gp_kernel(spec, lx, ly, static_cast<double>(a % cx - b % cx) * hx,
                          static_cast<double>(a / cx - b / cx) * hy);

  Eigen::LLT<Matrix> llt(K);
  if (llt.info() != Eigen::Success) {
    K.diagonal().array() += 1e-8 * spec.variance;
    llt.compute(K);
    if (llt.info() != Eigen::Success) throw NumericalError("sample_gp_ic: kernel matrix not positive definite");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal;
  Vector z(n);
  for (Index i = 0; i < n; ++i) z[i] = normal(rng);
  return (llt.matrixL() * z).array() + spec.mean;
}

Vector sample_gp_ic(const GpIcSpec& spec, const Grid2D& grid) {
  if (spec.coarse_nx > grid.nx() || spec.coarse_ny > grid.ny()) {
    throw std::invalid_argument("sample_gp_ic: coarse grid larger than target grid");
  }
  const Vector coarse = sample_gp_coarse(spec, grid.lx(), grid.ly());
  const Index cx = spec.coarse_nx, cy = spec.coarse_ny;
  const double hx = grid.lx() / static_cast<double>(cx), hy = grid.ly() / static_cast<double>(cy);
  auto at = [&](Index i, Index j) { return coarse[((i % cx) + cx) % cx + cx * (((j % cy) + cy) % cy)]; };
  Vector out(grid.cells());
  for (Index j = 0; j < grid.ny(); ++j) {
    for (Index i = 0; i < grid.nx(); ++i) {
      // Coarse nodes sit at coarse cell centres.
      const double u = grid.x(i) / hx - 0.5, v = grid.y(j) / hy - 0.5;
      const Index i0 = static_cast<Index>(std::floor(u)), j0 = static_cast<Index>(std::floor(v));
      const double fu = u - static_cast<double>(i0), fv = v - static_cast<double>(j0);
      out[grid.index(i, j)] = (1 - fu) * (1 - fv) * at(i0, j0) + fu * (1 - fv) * at(i0 + 1, j0) +
                              (1 - fu) * fv * at(i0, j0 + 1) + fu * fv * at(i0 + 1, j0 + 1);
    }
  }
  return out;
}

void SnapshotDataset::validate() const {
  if (times.empty()) throw std::invalid_argument("SnapshotDataset: no snapshots");
  if (times.size() != fields.size()) throw std::invalid_argument("SnapshotDataset: times and fields differ in count");
  if (times.front() != 0.0) throw std::invalid_argument("SnapshotDataset: first time must be 0");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1])) throw std::invalid_argument("SnapshotDataset: times must increase strictly");
  for (const auto& f : fields)
    if (f.size() != nx * ny) throw std::invalid_argument("SnapshotDataset: field size does not match grid");
}

SnapshotDataset rk4_reference_rollout(const TimeRhsFn& rhs, const Vector& ic, double dt_ref,
                                      const std::vector<double>& record_times, Index nx, Index ny) {
  if (!(dt_ref > 0.0)) throw std::invalid_argument("rk4_reference_rollout: dt_ref must be positive");
  std::vector<long> record_steps;
  for (double t : record_times) {
    const double m = std::round(t / dt_ref);
    if (std::abs(m * dt_ref - t) > 1e-12 * std::max(1.0, std::abs(t))) {
      std::ostringstream os;
      os << "rk4_reference_rollout: record time " << t << " is not a multiple of dt_ref " << dt_ref;
      throw std::invalid_argument(os.str());
    }
    record_steps.push_back(static_cast<long>(m));
  }
  SnapshotDataset ds;
  ds.nx = nx;
  ds.ny = ny;
  Vector u = ic;
  long step = 0;
  for (std::size_t r = 0; r < record_steps.size(); ++r) {
    while (step < record_steps[r]) {
      const double t = static_cast<double>(step) * dt_ref;
      const Vector k1 = rhs(t, u);
      const Vector k2 = rhs(t + 0.5 * dt_ref, u + 0.5 * dt_ref * k1);
      const Vector k3 = rhs(t + 0.5 * dt_ref, u + 0.5 * dt_ref * k2);
      const Vector k4 = rhs(t + dt_ref, u + dt_ref * k3);
      u += (dt_ref / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      ++step;
      if (!u.allFinite()) {
        throw NumericalError("rk4_reference_rollout: non-finite state at step " + std::to_string(step));
      }
    }
    ds.times.push_back(record_times[r]);
    ds.fields.push_back(u);
  }
  ds.validate();
  return ds;
}

Vector restrict_average(const Vector& fine, Index factor, Index nx, Index ny) {
  if (factor < 1 || fine.size() != factor * factor * nx * ny) {
    throw ShapeError("restrict_average: fine field size does not match factor and grid");
  }
  const Index fnx = factor * nx;
  Vector out = Vector::Zero(nx * ny);
  for (Index j = 0; j < ny * factor; ++j)
    for (Index i = 0; i < fnx; ++i) out[i / factor + nx * (j / factor)] += fine[i + fnx * j];
  return out / static_cast<double>(factor * factor);
}

}  // namespace imdiff
