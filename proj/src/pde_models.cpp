#include "imdiff/pde_models.hpp"

#include "imdiff/neural_fields.hpp"
#include "imdiff/ops.hpp"

#include <Eigen/LU>

#include <cmath>
#include <stdexcept>

namespace imdiff {
namespace {

using IndexTable = std::shared_ptr<const std::vector<Index>>;

Tensor shifted(const Tensor& t, const IndexTable& table) { return gather(t, table, {t.size()}); }

/// Periodic upwind face flux between L and R for face velocity a.
Tensor upwind_flux(const Tensor& a, const Tensor& left, const Tensor& right) {
  return 0.5 * a * (left + right) - 0.5 * abs(a) * (right - left);
}

void check_field(const Grid2D& grid, const Tensor& t, const char* what) {
  if (t.size() != grid.cells()) {
    throw ShapeError(std::string(what) + " has " + std::to_string(t.size()) + " entries, grid has " +
                     std::to_string(grid.cells()) + " cells");
  }
}

}  // namespace

Grid2D::Grid2D(Index nx, Index ny, double lx, double ly) : nx_(nx), ny_(ny), lx_(lx), ly_(ly) {
  if (nx < 4 || ny < 4) throw std::invalid_argument("Grid2D: nx and ny must be at least 4");
  if (!(lx > 0.0) || !(ly > 0.0)) throw std::invalid_argument("Grid2D: domain lengths must be positive");
  auto e = std::make_shared<std::vector<Index>>(), w = std::make_shared<std::vector<Index>>();
  auto n = std::make_shared<std::vector<Index>>(), s = std::make_shared<std::vector<Index>>();
  auto lap = std::make_shared<Stencil>();
  lap->rows = lap->cols = cells();
  lap->width = 5;
  const double ix2 = 1.0 / (dx() * dx()), iy2 = 1.0 / (dy() * dy());
  for (Index j = 0; j < ny; ++j) {
    for (Index i = 0; i < nx; ++i) {
      const Index c = index(i, j);
      e->push_back(index((i + 1) % nx, j));
      w->push_back(index((i + nx - 1) % nx, j));
      n->push_back(index(i, (j + 1) % ny));
      s->push_back(index(i, (j + ny - 1) % ny));
      lap->indices.insert(lap->indices.end(), {c, e->back(), w->back(), n->back(), s->back()});
      lap->weights.insert(lap->weights.end(), {-2.0 * (ix2 + iy2), ix2, ix2, iy2, iy2});
    }
  }
  east_ = e;
  west_ = w;
  north_ = n;
  south_ = s;
  laplacian_ = lap;
}

Tensor diffusion_term(const Grid2D& grid, const Tensor& phi, const Tensor& k) {
  if (k.size() == 1) return k * stencil_apply(phi, grid.laplacian());
  check_field(grid, k, "diffusivity");
  Tensor k_e = 0.5 * (k + shifted(k, grid.east()));
  Tensor k_n = 0.5 * (k + shifted(k, grid.north()));
  Tensor flux_e = k_e * (shifted(phi, grid.east()) - phi) * (1.0 / grid.dx());
  Tensor flux_n = k_n * (shifted(phi, grid.north()) - phi) * (1.0 / grid.dy());
  return (flux_e - shifted(flux_e, grid.west())) * (1.0 / grid.dx()) +
         (flux_n - shifted(flux_n, grid.south())) * (1.0 / grid.dy());
}

Tensor advdiff_rhs(const Grid2D& grid, const Tensor& phi, const CoeffFields& coeffs) {
  check_field(grid, phi, "advdiff_rhs: state");
  check_field(grid, coeffs.ux, "advdiff_rhs: ux");
  check_field(grid, coeffs.uy, "advdiff_rhs: uy");
  Tensor phi_e = shifted(phi, grid.east());
  Tensor phi_n = shifted(phi, grid.north());
  Tensor a_e = 0.5 * (coeffs.ux + shifted(coeffs.ux, grid.east()));
  Tensor a_n = 0.5 * (coeffs.uy + shifted(coeffs.uy, grid.north()));
  Tensor f_e = upwind_flux(a_e, phi, phi_e);
  Tensor f_n = upwind_flux(a_n, phi, phi_n);
  Tensor adv = (f_e - shifted(f_e, grid.west())) * (1.0 / grid.dx()) +
               (f_n - shifted(f_n, grid.south())) * (1.0 / grid.dy());
  return diffusion_term(grid, phi, coeffs.k) - adv;
}

Tensor burgers_rhs(const Grid2D& grid, const Tensor& u, const Tensor& nu) {
  check_field(grid, u, "burgers_rhs: state");
  auto roe = [](const Tensor& left, const Tensor& right) {
    Tensor a = 0.5 * (left + right);
    return 0.25 * (square(left) + square(right)) - 0.5 * abs(a) * (right - left);
  };
  Tensor f_e = roe(u, shifted(u, grid.east()));
  Tensor f_n = roe(u, shifted(u, grid.north()));
  Tensor adv = (f_e - shifted(f_e, grid.west())) * (1.0 / grid.dx()) +
               (f_n - shifted(f_n, grid.south())) * (1.0 / grid.dy());
  return diffusion_term(grid, u, nu) - adv;
}

Tensor crank_nicolson_residual(const Tensor& next, const Tensor& curr, double dt, const RhsFn& rhs) {
  if (!(dt > 0.0)) throw std::invalid_argument("crank_nicolson_residual: dt must be positive");
  return next - curr - (0.5 * dt) * (rhs(next) + rhs(curr));
}

Matrix dense_operator(const RhsFn& rhs, Index n) {
  Matrix A(n, n);
  for (Index c = 0; c < n; ++c) A.col(c) = rhs(Tensor(Vector::Unit(n, c))).value();
  return A;
}

// ---------------------------------------------------------------------------
// CVI

namespace {

struct CviStencils {
  std::shared_ptr<const Stencil> second_diff;  // C_{i-1} - 2 C_i + C_{i+1}, zero boundary
  Vector boundary;                             // contribution of the Dirichlet ends
};

CviStencils cvi_stencils(const CviGrid& grid) {
  const Index n = grid.n;
  auto s = std::make_shared<Stencil>();
  s->rows = s->cols = n;
  s->width = 3;
  for (Index i = 0; i < n; ++i) {
    // Out-of-range neighbours point at the cell itself with weight zero.
    s->indices.insert(s->indices.end(), {i > 0 ? i - 1 : i, i, i + 1 < n ? i + 1 : i});
    s->weights.insert(s->weights.end(), {i > 0 ? 1.0 : 0.0, -2.0, i + 1 < n ? 1.0 : 0.0});
  }
  Vector b = Vector::Zero(n);
  b[0] += grid.constants.c_in;
  b[n - 1] += grid.constants.c_in;
  return {s, b};
}

void check_cvi(const CviGrid& grid, const Tensor& t, const char* what) {
  if (t.size() != grid.n) {
    throw ShapeError(std::string(what) + " has " + std::to_string(t.size()) + " entries, expected " +
                     std::to_string(grid.n));
  }
}

}  // namespace

Tensor cvi_molarity_residual(const CviGrid& grid, const Tensor& c, const CviCoefficients& coeffs) {
  check_cvi(grid, c, "cvi_molarity_residual: C");
  const auto st = cvi_stencils(grid);
  const double h2 = grid.dx() * grid.dx();
  Tensor lap = (stencil_apply(c, st.second_diff) + Tensor(st.boundary)) * (1.0 / h2);
  return coeffs.k * coeffs.s_v * c - coeffs.d_eff * lap;
}

Tensor cvi_porosity_step(const CviGrid& grid, const Tensor& eps, const Tensor& c, const CviCoefficients& coeffs,
                         double dt) {
  check_cvi(grid, eps, "cvi_porosity_step: eps");
  if (!(dt > 0.0)) throw std::invalid_argument("cvi_porosity_step: dt must be positive");
  const auto& k = grid.constants;
  Tensor next = eps - (dt * k.q * k.molar_mass / k.rho_s) * (coeffs.k * coeffs.s_v * c);
  // max(a, m) = (a + m + |a - m|) / 2
  return 0.5 * (next + k.eps_min + abs(next - k.eps_min));
}

SolveResult<double> cvi_molarity_jacobi(const CviGrid& grid, const Vector& d_eff, const Vector& k_sv,
                                        const Vector& c0, double tol, int max_iter) {
  const Index n = grid.n;
  const double h2 = grid.dx() * grid.dx();
  Vector diag = 2.0 * d_eff / h2 + k_sv;
  Vector b = Vector::Zero(n);
  b[0] = d_eff[0] * grid.constants.c_in / h2;
  b[n - 1] += d_eff[n - 1] * grid.constants.c_in / h2;
  auto offdiag = [&](const Vector& x) -> Vector {
    Vector y(n);
    for (Index i = 0; i < n; ++i) {
      const double l = i > 0 ? x[i - 1] : 0.0, r = i + 1 < n ? x[i + 1] : 0.0;
      y[i] = -d_eff[i] * (l + r) / h2;
    }
    return y;
  };
  return jacobi_iterate<double>(diag, offdiag, b, c0, tol, max_iter);
}

Vector cvi_molarity_direct(const CviGrid& grid, const Vector& d_eff, const Vector& k_sv) {
  const Index n = grid.n;
  const double h2 = grid.dx() * grid.dx();
  Matrix A = Matrix::Zero(n, n);
  Vector b = Vector::Zero(n);
  for (Index i = 0; i < n; ++i) {
    A(i, i) = 2.0 * d_eff[i] / h2 + k_sv[i];
    if (i > 0) A(i, i - 1) = -d_eff[i] / h2;
    if (i + 1 < n) A(i, i + 1) = -d_eff[i] / h2;
  }
  b[0] = d_eff[0] * grid.constants.c_in / h2;
  b[n - 1] += d_eff[n - 1] * grid.constants.c_in / h2;
  return A.partialPivLu().solve(b);
}

CviCoefficients CviTruth::evaluate(const Tensor& eps) const {
  const Vector& e = eps.value();
  Vector d = d0 * e.array().pow(1.5).matrix();
  Vector s = (s0 * e.array() * (1.0 - e.array())).matrix();
  return {Tensor(std::move(d)), Tensor(Vector::Constant(e.size(), k0)), Tensor(std::move(s))};
}

CviNeuralOps::CviNeuralOps(ParamSet& params, std::string prefix, Index hidden)
    : prefix_(std::move(prefix)), hidden_(hidden) {
  const Index count = DenseStack({1, hidden_, 1}).param_count();
  for (const char* name : {"d_eff", "k", "s_v"}) params.add(prefix_ + "." + name, count);
}

void CviNeuralOps::initialize(ParamSet& params, std::mt19937_64& rng) const {
  HyperNet init_layout({1, hidden_, 1});
  for (const char* name : {"d_eff", "k", "s_v"}) params.set(prefix_ + "." + name, init_layout.init(rng));
}

Tensor CviNeuralOps::net(const ParamSet& params, const Tensor& flat, const std::string& name,
                         const Tensor& eps) const {
  DenseStack stack({1, hidden_, 1});
  Tensor p = params.view(flat, prefix_ + "." + name);
  const Index n = eps.size();
  Tensor z = tanh(dense(reshape(eps, {n, 1}), stack.weight(p, 0), stack.bias(p, 0)));
  return softplus(reshape(dense(z, stack.weight(p, 1), stack.bias(p, 1)), {n}));
}

CviCoefficients CviNeuralOps::evaluate(const ParamSet& params, const Tensor& flat, const Tensor& eps) const {
  return {net(params, flat, "d_eff", eps), net(params, flat, "k", eps), net(params, flat, "s_v", eps)};
}

}  // namespace imdiff
