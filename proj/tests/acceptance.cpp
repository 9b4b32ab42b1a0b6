// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run all criteria
//   acceptance 1 3 9      run a subset

#include "imdiff/autodiff.hpp"
#include "imdiff/experiments.hpp"
#include "imdiff/krylov.hpp"
#include "imdiff/ops.hpp"
#include "imdiff/training.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <chrono>
#include <complex>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <unistd.h>

using namespace imdiff;
namespace fs = std::filesystem;

namespace {

using clock_type = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double rel(const Vector& a, const Vector& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(b.cwiseAbs().maxCoeff(), 1e-300);
}

Vector random_vector(Index n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("imdiff_acceptance_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ImplicitOptions tight() {
  ImplicitOptions o;
  o.newton.tol = 1e-13;
  o.newton.abs_tol = 1e-14;
  o.adjoint_tol = 1e-13;
  return o;
}

Vector smooth_ic(const Grid2D& g, std::uint64_t seed, double ls = 0.4) {
  GpIcSpec s;
  s.coarse_nx = 4;
  s.coarse_ny = 4;
  s.length_scale = ls;
  s.seed = seed;
  return sample_gp_ic(s, g);
}

CoeffFields truth_coeffs(const Grid2D& g, std::uint64_t seed, double scale, double k) {
  auto fx = CosineFieldSpec::sample(4, seed, true), fy = CosineFieldSpec::sample(4, seed + 1, true);
  return {Tensor(scale * sample_cosine_field(fx, g, 0.0) / fx.bound()),
          Tensor(scale * sample_cosine_field(fy, g, 0.0) / fy.bound()), Tensor(Vector::Constant(1, k))};
}

// CN residual of the advection-diffusion system, theta = [ux, uy, k].
TensorResidualFn advdiff_cn(const Grid2D& g, double dt) {
  const Index n = g.cells();
  return [g, n, dt](const Tensor& x, const Tensor& prev, const Tensor& th) {
    CoeffFields c{slice(th, 0, {n}), slice(th, n, {n}), slice(th, 2 * n, {1})};
    return crank_nicolson_residual(x, prev, dt, [&](const Tensor& u) { return advdiff_rhs(g, u, c); });
  };
}

Vector pack(const CoeffFields& c) {
  Vector v(c.ux.size() + c.uy.size() + c.k.size());
  v << c.ux.value(), c.uy.value(), c.k.value();
  return v;
}

CnfConfig small_cnf() {
  CnfConfig c;
  c.hyper_hidden = {16, 16};
  c.latent_dim = 6;
  c.siren_hidden = {16, 16};
  c.omega0 = 10.0;
  c.projector_init_scale = 0.1;
  return c;
}

// ---------------------------------------------------------------------------

Outcome criterion1() {
  Grid2D g(8, 8);
  const double dt = 1e-2;
  auto f = advdiff_cn(g, dt);
  const Vector prev0 = smooth_ic(g, 1);
  const Vector theta0 = pack(truth_coeffs(g, 10, 1.0, 0.02));
  std::mt19937_64 rng(2);
  const Vector w = random_vector(g.cells(), rng);

  auto grads = [&](bool naive) {
    Tape tape;
    Tensor prev = tape.leaf(prev0);
    Tensor theta = tape.leaf(theta0);
    double res = 0.0;
    Tensor out = naive ? naive_unrolled_step(f, prev, theta, 40, &res) : implicit_step(f, prev, theta, tight());
    auto gm = tape.backward(sum(out * Tensor(w)));
    Vector gv(prev0.size() + theta0.size());
    gv << gm.of(prev), gm.of(theta);
    return std::make_pair(gv, res);
  };
  const auto [g_im, unused] = grads(false);
  const auto [g_naive, naive_res] = grads(true);
  (void)unused;

  auto loss = [&](const Vector& z) {
    Tensor out = implicit_step(f, Tensor(Vector(z.head(prev0.size()))), Tensor(Vector(z.tail(theta0.size()))), tight());
    return out.value().dot(w);
  };
  Vector z(prev0.size() + theta0.size());
  z << prev0, theta0;
  Vector fd(z.size());
  const double h = 1e-6;
  for (Index i = 0; i < z.size(); ++i) {
    Vector zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    fd[i] = (loss(zp) - loss(zm)) / (2 * h);
  }
  const double e_naive = rel(g_im, g_naive), e_fd = rel(g_im, fd);
  return {e_naive <= 1e-6 && e_fd <= 1e-4 && naive_res < 1e-12,
          "vs naive unroll " + fmt(e_naive) + " (<=1e-6), vs finite differences " + fmt(e_fd) + " (<=1e-4)"};
}

Outcome criterion2() {
  Grid2D g(8, 8);
  AdvDiffModelOptions o;
  o.velocity = VelocitySource::Neural;
  o.cnf = small_cnf();
  HybridModel m = make_advdiff_model(g, o, 3);
  const Vector ic = smooth_ic(g, 4);
  RolloutConfig cfg;
  cfg.dt = 1e-2;
  cfg.t_end = 0.05;
  cfg.implicit = tight();
  SnapshotDataset ds;
  ds.nx = ds.ny = 8;
  ds.times = {0.0, 0.05};
  ds.fields = {ic, 0.8 * ic.reverse()};
  LossSpec spec;
  auto loss_of = [&](const Tensor& flat) {
    return total_loss(rollout(m, Tensor(ic), flat, cfg, ds.times), ds, *m.params, flat, spec);
  };
  const Vector p0 = m.params->values();
  Tape tape;
  Tensor flat = tape.leaf(p0);
  const Vector grad = tape.backward(loss_of(flat)).of(flat);

  // 20 coordinates drawn from the CNF segments.
  std::vector<Index> pool;
  for (const auto& s : m.params->segments())
    if (s.name.rfind("velocity.", 0) == 0)
      for (Index i = 0; i < s.size; ++i) pool.push_back(s.offset + i);
  std::mt19937_64 rng(5);
  std::shuffle(pool.begin(), pool.end(), rng);
  Vector ad(20), fd(20);
  const double h = 1e-6;
  for (Index k = 0; k < 20; ++k) {
    const Index i = pool[static_cast<std::size_t>(k)];
    Vector pp = p0, pm = p0;
    pp[i] += h;
    pm[i] -= h;
    ad[k] = grad[i];
    fd[k] = (loss_of(Tensor(pp)).item() - loss_of(Tensor(pm)).item()) / (2 * h);
  }
  const double e = rel(ad, fd);
  return {e <= 1e-4, "20 CNF coordinates of " + std::to_string(pool.size()) + ", rel. error " + fmt(e) + " (<=1e-4)"};
}

Outcome criterion3() {
  Grid2D g(8, 8);
  const double dt = 1e-2;
  auto f = advdiff_cn(g, dt);
  const Vector ic = smooth_ic(g, 6);
  const Vector theta0 = pack(truth_coeffs(g, 20, 8.0, 0.02));
  const int steps = 5;

  auto run = [&](const std::function<Tensor(const Tensor&, const Tensor&, int)>& step) {
    Tape tape;
    Tensor theta = tape.leaf(theta0);
    Tensor u = tape.leaf(ic);
    for (int s = 0; s < steps; ++s) u = step(u, theta, s);
    tape.backward(sum(square(u)));
    return tape.stats();
  };

  std::vector<int> kt;
  std::vector<std::size_t> nodes, scalars;
  for (double tol : {1e-1, 3e-2, 1e-2, 1e-3, 1e-4, 1e-6, 1e-8, 1e-10, 1e-12, 1e-14}) {
    auto log = std::make_shared<SolverLog>();
    auto st = run([&](const Tensor& u, const Tensor& th, int s) {
      ImplicitOptions o;
      o.solver = RootSolver::FixedPoint;
      o.fixed_point_tol = tol;
      o.log = log;
      o.step_index = s;
      o.adjoint_tol = 1e-12;
      return implicit_step(f, u, th, o);
    });
    kt.push_back(*std::max_element(log->forward_iterations.begin(), log->forward_iterations.end()));
    nodes.push_back(st.peak_nodes);
    scalars.push_back(st.peak_stored_scalars);
  }
  const auto [nmin, nmax] = std::minmax_element(nodes.begin(), nodes.end());
  const auto [smin, smax] = std::minmax_element(scalars.begin(), scalars.end());
  const auto [kmin, kmax] = std::minmax_element(kt.begin(), kt.end());
  const bool im_const = *nmax - *nmin <= 1 && *smax == *smin;
  const bool covers = *kmin <= 3 && *kmax >= 30;

  std::vector<int> ks{2, 4, 8, 16, 32};
  std::vector<double> naive;
  for (int k : ks) naive.push_back(static_cast<double>(
      run([&](const Tensor& u, const Tensor& th, int) { return naive_unrolled_step(f, u, th, k); }).peak_stored_scalars));
  const double slope = (naive.back() - naive.front()) / (ks.back() - ks.front());
  bool affine = slope > 0;
  for (std::size_t i = 1; i < ks.size(); ++i) {
    const double si = (naive[i] - naive[i - 1]) / (ks[i] - ks[i - 1]);
    affine = affine && std::abs(si - slope) <= 1e-9 * slope;
  }
  std::ostringstream os;
  os << "Im peak scalars " << *smin << ".." << *smax << ", nodes " << *nmin << ".." << *nmax << " over K~ " << *kmin
     << ".." << *kmax << "; naive slope " << slope << " scalars/iteration, affine " << (affine ? "yes" : "no");
  return {im_const && covers && affine, os.str()};
}

Outcome criterion4() {
  Grid2D g(8, 8);
  AdvDiffModelOptions o;
  o.velocity = VelocitySource::Neural;
  o.dynamic = true;
  o.cnf = small_cnf();
  HybridModel m = make_advdiff_model(g, o, 7);
  const Vector ic = smooth_ic(g, 8);
  SnapshotDataset ds;
  ds.nx = ds.ny = 8;
  ds.times = {0.0, 0.02, 0.05};
  ds.fields = {ic, 0.9 * ic, 0.8 * ic};
  auto run = [&](int cp) {
    RolloutConfig cfg;
    cfg.dt = 1e-3;
    cfg.t_end = 0.05;
    cfg.checkpoint_every = cp;
    Tape tape;
    Tensor flat = tape.leaf(m.params->values());
    Vector grad = tape.backward(total_loss(rollout(m, Tensor(ic), flat, cfg, ds.times), ds, *m.params, flat, {})).of(flat);
    return std::make_pair(grad, tape.stats().peak_stored_scalars);
  };
  const auto [g0, s0] = run(0);
  bool ok = true;
  std::ostringstream os;
  os << "50 steps, plain peak " << s0 << " scalars;";
  for (int cp : {1, 2, 5}) {
    const auto [gc, sc] = run(cp);
    const double e = rel(gc, g0);
    ok = ok && e <= 1e-12 && sc < s0;
    os << " cp=" << cp << ": rel " << fmt(e) << ", peak " << sc << ";";
  }
  return {ok, os.str()};
}

exp::ExperimentConfig stability_config(const fs::path& out) {
  exp::ExperimentConfig c = exp::default_config(exp::Case::AdvDiffSteady);
  c.out_dir = out.string();
  c.truth.velocity_scale = 2.0;
  c.bench.t_end = 0.4;
  c.bench.ref_refine = 4;
  return c;
}

Outcome criterion5() {
  const auto s = exp::cmd_bench_stability(stability_config(scratch("stability")), true);
  auto final_error = [&](const std::string& st, double dt) {
    for (const auto& r : s.vs_dt)
      if (r.stepper == st && std::abs(r.dt - dt) < 1e-15) return r;
    throw std::logic_error("missing stability row");
  };
  const auto e3 = final_error("explicit-euler", 1e-3), e2 = final_error("explicit-euler", 1e-2);
  const bool ex_ok = !e3.diverged && (e2.diverged || e2.error >= 5.0 * e3.error);
  double lo = 1e300, hi = 0.0;
  bool im_diverged = false;
  for (const auto& r : s.vs_dt) {
    if (r.stepper != "implicit-cn") continue;
    im_diverged = im_diverged || r.diverged;
    lo = std::min(lo, r.error);
    hi = std::max(hi, r.error);
  }
  std::ostringstream os;
  os << "Euler dt=1e-3 " << fmt(e3.error) << ", dt=1e-2 " << (e2.diverged ? "diverged" : fmt(e2.error))
     << " (>=5x); CN range " << fmt(lo) << ".." << fmt(hi) << " ratio " << fmt(hi / lo) << " (<=2)";
  return {ex_ok && !im_diverged && hi <= 2.0 * lo, os.str()};
}

Outcome criterion6() {
  exp::ExperimentConfig c = exp::default_config(exp::Case::AdvDiffSteady);
  c.out_dir = scratch("inverse").string();
  c.seed = 3;
  c.epochs = 2000;
  c.save_every = 500;
  exp::cmd_generate(c, true);
  const auto t = exp::cmd_train(c, true);
  const auto e = exp::cmd_eval(c);
  std::ostringstream os;
  os << t.final_epoch << " epochs; train IC " << fmt(e.train_horizon_error) << " (<=0.05), OOD "
     << fmt(e.ood_horizon_error) << " (<=0.10), velocity " << fmt(e.field_error) << " (<=0.10)";
  return {e.train_horizon_error <= 0.05 && e.ood_horizon_error <= 0.10 && e.field_error <= 0.10, os.str()};
}

Outcome criterion7() {
  exp::ExperimentConfig c = exp::default_config(exp::Case::Burgers);
  c.out_dir = scratch("burgers").string();
  c.seed = 5;
  c.epochs = 300;
  c.save_every = 100;
  exp::cmd_generate(c, true);
  const auto t = exp::cmd_train(c, true);
  const auto e = exp::cmd_eval(c);
  std::ostringstream os;
  os << t.final_epoch << " epochs; state " << fmt(e.train_horizon_error) << " train / " << fmt(e.test_horizon_error)
     << " test (<=0.08), gradient sign agreement " << fmt(e.gradient_sign_agreement) << " (>=0.70), nu error "
     << fmt(e.field_error);
  return {e.train_horizon_error <= 0.08 && e.test_horizon_error <= 0.08 && e.gradient_sign_agreement >= 0.70, os.str()};
}

Outcome criterion8() {
  CviGrid grid;
  grid.n = 32;
  grid.constants.q = 0.5;
  ParamSet ps;
  CviNeuralOps ops(ps, "cvi", 16);
  std::mt19937_64 rng(9);
  ops.initialize(ps, rng);
  CviCoefficientFn co = [&](const Tensor& flat, const Tensor& eps) { return ops.evaluate(ps, flat, eps); };
  CviTruth truth;
  CviCoefficientFn co_truth = [&](const Tensor&, const Tensor& eps) { return truth.evaluate(eps); };
  CviRolloutConfig cfg;
  cfg.dt = 0.02;
  cfg.steps = 50;
  cfg.implicit.adjoint_tol = 1e-13;
  const Tensor eps0(Vector::Constant(grid.n, 0.7));
  const Vector target = cvi_rollout(grid, co_truth, eps0, Tensor(Vector::Zero(1)), cfg).eps.value();
  auto loss_of = [&](const Tensor& flat) { return mean(square(cvi_rollout(grid, co, eps0, flat, cfg).eps - Tensor(target))); };

  const Vector p0 = ps.values();
  Tape tape;
  Tensor flat = tape.leaf(p0);
  const Vector grad = tape.backward(loss_of(flat)).of(flat);
  Vector fd(p0.size());
  const double h = 1e-6;
  for (Index i = 0; i < p0.size(); ++i) {
    Vector pp = p0, pm = p0;
    pp[i] += h;
    pm[i] -= h;
    fd[i] = (loss_of(Tensor(pp)).item() - loss_of(Tensor(pm)).item()) / (2 * h);
  }
  const double e = rel(grad, fd);

  auto count = [&](double tol) {
    CviRolloutConfig c2 = cfg;
    c2.jacobi_tol = tol;
    Tape t;
    Tensor f = t.leaf(p0);
    auto r = cvi_rollout(grid, co, eps0, f, c2);
    long iters = 0;
    for (int k : r.log->forward_iterations) iters += k;
    return std::make_pair(t.node_count(), iters);
  };
  const auto [n_lo, it_lo] = count(1e-6);
  const auto [n_hi, it_hi] = count(1e-12);
  std::ostringstream os;
  os << p0.size() << " parameters, rel. error " << fmt(e) << " (<=1e-4); tape nodes " << n_lo << " vs " << n_hi
     << " for " << it_lo << " vs " << it_hi << " Jacobi sweeps";
  return {e <= 1e-4 && n_lo == n_hi && it_hi > it_lo, os.str()};
}

Outcome criterion9() {
  std::mt19937_64 rng(12);
  std::ostringstream os;
  bool ok = true;

  // Krylov solvers against dense direct solves.
  double e_bicg = 0.0, e_cg = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    Matrix A(16, 16), S(16, 16);
    for (Index i = 0; i < 16; ++i) {
      A.row(i) = random_vector(16, rng).transpose();
      S.row(i) = random_vector(16, rng).transpose();
    }
    A += 8.0 * Matrix::Identity(16, 16);
    const Matrix spd = S.transpose() * S + Matrix::Identity(16, 16);
    const Vector b = random_vector(16, rng);
    const Vector x_lu = A.partialPivLu().solve(b);
    const Vector x_llt = spd.llt().solve(b);
    auto r1 = bicgstab(make_operator(A), b, Vector::Zero(16), 1e-12, 500);
    auto r2 = conjugate_gradient(make_operator(spd), b, Vector::Zero(16), 1e-12, 500);
    e_bicg = std::max(e_bicg, rel(r1.x, x_lu));
    e_cg = std::max(e_cg, rel(r2.x, x_llt));
  }
  ok = ok && e_bicg <= 1e-8 && e_cg <= 1e-8;
  os << "BiCGStab " << fmt(e_bicg) << ", CG " << fmt(e_cg) << " (<=1e-8); ";

  // RK4 order.
  Grid2D g(16, 8);
  const CoeffFields c = truth_coeffs(g, 30, 1.0, 0.02);
  GpIcSpec ics;
  ics.coarse_nx = 8;
  ics.coarse_ny = 4;
  const Vector ic = sample_gp_ic(ics, g);
  auto rhs = [&](double, const Vector& u) { return advdiff_rhs(g, Tensor(u), c).value(); };
  std::vector<Vector> finals;
  for (double dt : {8e-3, 4e-3, 2e-3, 1e-3}) finals.push_back(rk4_reference_rollout(rhs, ic, dt, {0.0, 0.2}, 16, 8).fields.back());
  double order_lo = 1e9, order_hi = 0.0;
  for (std::size_t i = 2; i < finals.size(); ++i) {
    const double p = std::log2((finals[i - 1] - finals[i - 2]).norm() / (finals[i] - finals[i - 1]).norm());
    order_lo = std::min(order_lo, p);
    order_hi = std::max(order_hi, p);
  }
  ok = ok && order_lo >= 3.8 && order_hi <= 4.2;
  os << "RK4 order " << fmt(order_lo) << ".." << fmt(order_hi) << "; ";

  // CN A-stability on the dense 8x8 operator.
  Grid2D g8(8, 8);
  const CoeffFields c8 = truth_coeffs(g8, 40, 1.0, 0.02);
  const Matrix A = dense_operator([&](const Tensor& u) { return advdiff_rhs(g8, u, c8); }, g8.cells());
  Eigen::EigenSolver<Matrix> es(A);
  double max_re = -1e300, max_amp = 0.0;
  for (Index k = 0; k < A.rows(); ++k) {
    const std::complex<double> lam = es.eigenvalues()[k];
    max_re = std::max(max_re, lam.real());
    if (lam.real() > 1e-12) continue;
    for (double dt : {1e-3, 1e-2, 1e-1, 1.0, 10.0})
      max_amp = std::max(max_amp, std::abs((1.0 + 0.5 * dt * lam) / (1.0 - 0.5 * dt * lam)));
  }
  ok = ok && max_re <= 1e-12 && max_amp <= 1.0 + 1e-12;
  os << "CN max |amplification| " << std::setprecision(15) << max_amp << std::setprecision(6) << "; ";

  // Finite-volume conservation.
  double cons = 0.0;
  Grid2D g2(32, 16);
  for (int trial = 0; trial < 3; ++trial) {
    const Vector phi = random_vector(g2.cells(), rng, -2.0, 2.0);
    const CoeffFields cf{Tensor(random_vector(g2.cells(), rng, -3.0, 3.0)), Tensor(random_vector(g2.cells(), rng, -3.0, 3.0)),
                         Tensor(Vector::Constant(1, 0.05))};
    const Vector nu = random_vector(g2.cells(), rng, 0.005, 0.02);
    const double cell = g2.dx() * g2.dy();
    cons = std::max(cons, std::abs(advdiff_rhs(g2, Tensor(phi), cf).value().sum() * cell) / phi.norm());
    cons = std::max(cons, std::abs(burgers_rhs(g2, Tensor(phi), Tensor(nu)).value().sum() * cell) / phi.norm());
  }
  ok = ok && cons <= 1e-10;
  os << "FV conservation " << fmt(cons) << " (<=1e-10)";
  return {ok, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
    double time_limit;  // seconds, 0 = unbounded
  };
  const std::vector<Criterion> criteria{
      {"adjoint gradient of one CN step", criterion1, 10},
      {"full-rollout gradient w.r.t. CNF parameters", criterion2, 60},
      {"memory decoupled from root-find iterations", criterion3, 60},
      {"checkpointing exactness", criterion4, 0},
      {"stability trend across dt", criterion5, 300},
      {"inverse recovery, steady advection", criterion6, 1800},
      {"Burgers viscosity inference", criterion7, 2700},
      {"CVI nested solve gradient", criterion8, 120},
      {"solver and numerics unit suite", criterion9, 0},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = clock_type::now();
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(clock_type::now() - t0).count();
    if (criteria[i].time_limit > 0 && secs > criteria[i].time_limit) {
      o.pass = false;
      o.detail += "; over time limit " + fmt(criteria[i].time_limit) + " s";
    }
    if (!o.pass) ++failed;
    std::printf("[%s] %d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  std::error_code ec;
  fs::remove_all(fs::temp_directory_path() / ("imdiff_acceptance_" + std::to_string(::getpid())), ec);
  return failed == 0 ? 0 : 1;
}
