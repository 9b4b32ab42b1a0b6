#include "imdiff/implicit_layer.hpp"
#include "imdiff/ops.hpp"
#include "imdiff/pde_models.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <numbers>

using namespace imdiff;

namespace {

CoeffFields random_coeffs(const Grid2D& g, std::mt19937_64& rng, double k = 0.05) {
  return {Tensor(test::random_vector(g.cells(), rng)), Tensor(test::random_vector(g.cells(), rng)),
          Tensor(Vector::Constant(1, k))};
}

}  // namespace

TEST_CASE("Grid2D validates its size") {
  CHECK_THROWS(Grid2D(3, 8));
  Grid2D g(8, 4);
  CHECK(g.dx() == 0.25);
  CHECK(g.dy() == 0.25);
  CHECK((*g.east())[g.index(7, 2)] == g.index(0, 2));
  CHECK((*g.south())[g.index(1, 0)] == g.index(1, 3));
}

TEST_CASE("advection-diffusion RHS vanishes on a uniform state") {
  // Flux form: the RHS of a constant state is -phi div(u), zero for discretely
  // divergence-free velocities (ux = ux(y), uy = uy(x)).
  Grid2D g(8, 6);
  std::mt19937_64 rng(1);
  const Vector ax = test::random_vector(g.ny(), rng), ay = test::random_vector(g.nx(), rng);
  Vector ux(g.cells()), uy(g.cells());
  for (Index j = 0; j < g.ny(); ++j)
    for (Index i = 0; i < g.nx(); ++i) {
      ux[g.index(i, j)] = ax[j];
      uy[g.index(i, j)] = ay[i];
    }
  CoeffFields c{Tensor(ux), Tensor(uy), Tensor(Vector::Constant(1, 0.05))};
  Tensor rhs = advdiff_rhs(g, Tensor(Vector::Constant(g.cells(), 2.5)), c);
  CHECK(rhs.value().cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("advection-diffusion RHS conserves the domain integral") {
  Grid2D g(10, 8);
  std::mt19937_64 rng(2);
  Vector spike = Vector::Zero(g.cells());
  spike[g.index(3, 4)] = 1.0;
  CoeffFields still{Tensor(Vector::Zero(g.cells())), Tensor(Vector::Zero(g.cells())), Tensor(Vector::Constant(1, 0.3))};
  Tensor r = advdiff_rhs(g, Tensor(spike), still);
  CHECK(std::abs(r.value().sum() * g.dx() * g.dy()) <= 1e-10 * spike.norm());
  CHECK(r.value().cwiseAbs().maxCoeff() > 0.0);

  const Vector phi = test::random_vector(g.cells(), rng);
  CoeffFields c = random_coeffs(g, rng);
  c.k = Tensor(test::random_vector(g.cells(), rng, 0.01, 0.1));
  r = advdiff_rhs(g, Tensor(phi), c);
  CHECK(std::abs(r.value().sum() * g.dx() * g.dy()) <= 1e-10 * phi.norm());
}

TEST_CASE("upwind advection converges at first order") {
  std::vector<double> errors;
  for (Index nx : {32, 64, 128}) {
    Grid2D g(nx, 4);
    Vector phi(g.cells()), exact(g.cells());
    for (Index j = 0; j < 4; ++j) {
      for (Index i = 0; i < nx; ++i) {
        const double x = g.x(i);
        phi[g.index(i, j)] = std::sin(2 * std::numbers::pi * x / g.lx());
        exact[g.index(i, j)] = -(2 * std::numbers::pi / g.lx()) * std::cos(2 * std::numbers::pi * x / g.lx());
      }
    }
    CoeffFields c{Tensor(Vector::Ones(g.cells())), Tensor(Vector::Zero(g.cells())), Tensor(Vector::Zero(1))};
    errors.push_back((advdiff_rhs(g, Tensor(phi), c).value() - exact).cwiseAbs().maxCoeff());
  }
  for (std::size_t i = 1; i < errors.size(); ++i) {
    const double order = std::log2(errors[i - 1] / errors[i]);
    CHECK(order == doctest::Approx(1.0).epsilon(0.1));
  }
}

TEST_CASE("Burgers RHS: uniform state and diffusion conservation") {
  Grid2D g(8, 8);
  std::mt19937_64 rng(3);
  Tensor nu(test::random_vector(g.cells(), rng, 0.005, 0.02));
  CHECK(burgers_rhs(g, Tensor(Vector::Constant(g.cells(), -0.7)), nu).value().cwiseAbs().maxCoeff() < 1e-12);
  const Vector u = test::random_vector(g.cells(), rng);
  CHECK(std::abs(diffusion_term(g, Tensor(u), nu).value().sum()) <= 1e-10 * u.norm());
  CHECK(std::abs(burgers_rhs(g, Tensor(u), nu).value().sum()) <= 1e-10 * u.norm());
}

TEST_CASE("face-averaged diffusion agrees with the Laplacian for constant k") {
  Grid2D g(6, 5);
  std::mt19937_64 rng(4);
  const Vector u = test::random_vector(g.cells(), rng);
  Vector a = diffusion_term(g, Tensor(u), Tensor(Vector::Constant(1, 0.3))).value();
  Vector b = diffusion_term(g, Tensor(u), Tensor(Vector::Constant(g.cells(), 0.3))).value();
  CHECK(test::rel_diff(a, b) < 1e-13);
}

TEST_CASE("Crank-Nicolson residual closed forms") {
  const double lambda = 1.0, dt = 0.1;
  RhsFn decay = [&](const Tensor& u) { return -lambda * u; };
  Tensor curr(Vector::Constant(1, 1.0));
  const double next = (1 - lambda * dt / 2) / (1 + lambda * dt / 2);
  CHECK(std::abs(crank_nicolson_residual(Tensor(Vector::Constant(1, next)), curr, dt, decay).item()) < 1e-15);
  CHECK(std::abs(crank_nicolson_residual(Tensor(Vector::Constant(1, 0.9)), curr, dt, decay).item()) > 1e-3);

  RhsFn zero = [](const Tensor& u) { return 0.0 * u; };
  CHECK(crank_nicolson_residual(curr, curr, dt, zero).item() == 0.0);
  CHECK(crank_nicolson_residual(Tensor(Vector::Constant(1, 1.1)), curr, dt, zero).item() != 0.0);
  CHECK_THROWS(crank_nicolson_residual(curr, curr, 0.0, zero));
}

TEST_CASE("CN step on an 8x8 grid matches a dense linear solve") {
  Grid2D g(8, 8);
  std::mt19937_64 rng(5);
  CoeffFields c = random_coeffs(g, rng, 0.02);
  RhsFn rhs = [&](const Tensor& u) { return advdiff_rhs(g, u, c); };
  const double dt = 0.02;
  const Matrix A = dense_operator(rhs, g.cells());
  const Matrix I = Matrix::Identity(g.cells(), g.cells());
  const Vector phi = test::random_vector(g.cells(), rng);
  const Vector expected = (I - 0.5 * dt * A).partialPivLu().solve((I + 0.5 * dt * A) * phi);

  TensorResidualFn f = [&](const Tensor& next, const Tensor& prev, const Tensor&) {
    return crank_nicolson_residual(next, prev, dt, rhs);
  };
  ImplicitOptions o;
  o.newton.tol = 1e-12;
  o.newton.linear_rtol = 1e-12;
  Tensor next = implicit_step(f, Tensor(phi), Tensor(Vector::Zero(1)), o);
  CHECK(test::rel_diff(next.value(), expected) <= 1e-8);
}

TEST_CASE("CN step leaves a uniform state unchanged without velocity") {
  Grid2D g(8, 8);
  CoeffFields c{Tensor(Vector::Zero(g.cells())), Tensor(Vector::Zero(g.cells())), Tensor(Vector::Constant(1, 0.1))};
  TensorResidualFn f = [&](const Tensor& next, const Tensor& prev, const Tensor&) {
    return crank_nicolson_residual(next, prev, 0.05, [&](const Tensor& u) { return advdiff_rhs(g, u, c); });
  };
  Tape tape;
  Tensor prev = tape.leaf(Vector::Constant(g.cells(), 1.7));
  Tensor out = implicit_step(f, prev, tape.leaf(Vector::Zero(1)));
  CHECK((out.value().array() - 1.7).abs().maxCoeff() < 1e-12);
}

TEST_CASE("CN amplification is A-stable on the 8x8 operator spectrum") {
  Grid2D g(8, 8);
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 2; ++trial) {
    CoeffFields c = trial == 0 ? CoeffFields{Tensor(Vector::Constant(g.cells(), 1.3)),
                                             Tensor(Vector::Constant(g.cells(), -0.4)), Tensor(Vector::Constant(1, 0.02))}
                               : random_coeffs(g, rng, 0.02);
    const Matrix A = dense_operator([&](const Tensor& u) { return advdiff_rhs(g, u, c); }, g.cells());
    Eigen::EigenSolver<Matrix> es(A);
    int stable_modes = 0;
    for (double dt : {1e-3, 1e-2, 1e-1, 1.0, 10.0}) {
      for (Index m = 0; m < A.rows(); ++m) {
        const std::complex<double> lam = es.eigenvalues()[m];
        if (lam.real() > 1e-12) continue;
        ++stable_modes;
        const std::complex<double> amp = (1.0 + 0.5 * dt * lam) / (1.0 - 0.5 * dt * lam);
        CHECK(std::abs(amp) <= 1.0 + 1e-12);
      }
    }
    if (trial == 0) CHECK(stable_modes == 5 * A.rows());
  }
}

TEST_CASE("CVI molarity residual: harmonic and zero states") {
  CviGrid grid;
  grid.n = 16;
  CviCoefficients coeffs{Tensor(Vector::Constant(16, 0.7)), Tensor(Vector::Zero(16)), Tensor(Vector::Zero(16))};
  CHECK(cvi_molarity_residual(grid, Tensor(Vector::Constant(16, grid.constants.c_in)), coeffs)
            .value()
            .cwiseAbs()
            .maxCoeff() < 1e-10);
  grid.constants.c_in = 0.0;
  coeffs.k = Tensor(Vector::Ones(16));
  coeffs.s_v = Tensor(Vector::Ones(16));
  CHECK(cvi_molarity_residual(grid, Tensor(Vector::Zero(16)), coeffs).value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("CVI molarity: Jacobi, residual and dense solve agree") {
  CviGrid grid;
  std::mt19937_64 rng(7);
  const Vector eps = test::random_vector(grid.n, rng, 0.3, 0.7);
  CviTruth truth;
  truth.k0 = 2.0;
  CviCoefficients c = truth.evaluate(Tensor(eps));
  const Vector ksv = c.k.value().cwiseProduct(c.s_v.value());
  const Vector direct = cvi_molarity_direct(grid, c.d_eff.value(), ksv);
  auto jac = cvi_molarity_jacobi(grid, c.d_eff.value(), ksv, Vector::Zero(grid.n), 1e-13, 100000);
  REQUIRE(jac.report.converged);
  CHECK(test::rel_diff(jac.x, direct) <= 1e-8);
  CHECK(cvi_molarity_residual(grid, Tensor(direct), c).value().cwiseAbs().maxCoeff() < 1e-9);
  CHECK(direct.maxCoeff() < grid.constants.c_in);
  CHECK(direct.minCoeff() > 0.0);
}

TEST_CASE("CVI porosity step") {
  CviGrid grid;
  grid.n = 4;
  CviCoefficients c{Tensor(Vector::Ones(4)), Tensor(Vector::Constant(4, 2.0)), Tensor(Vector::Constant(4, 0.5))};
  const Vector eps0 = Vector::Constant(4, 0.5);
  CHECK(cvi_porosity_step(grid, Tensor(eps0), Tensor(Vector::Zero(4)), c, 0.1).value() == eps0);

  Tensor eps(eps0);
  Tensor conc(Vector::Constant(4, 0.3));
  const double rate = 2.0 * 0.5 * 0.3;  // q M_s K S_v C / rho_s with unit constants
  for (int s = 1; s <= 5; ++s) {
    eps = cvi_porosity_step(grid, eps, conc, c, 0.1);
    CHECK(eps[0] == doctest::Approx(0.5 - s * 0.1 * rate).epsilon(1e-12));
  }
  for (int s = 0; s < 100; ++s) eps = cvi_porosity_step(grid, eps, conc, c, 0.1);
  CHECK(eps[2] == doctest::Approx(grid.constants.eps_min).epsilon(1e-12));
}

TEST_CASE("CVI neural operators are positive and differentiable") {
  ParamSet ps;
  CviNeuralOps ops(ps, "cvi");
  std::mt19937_64 rng(1);
  ops.initialize(ps, rng);
  Tape tape;
  Tensor flat = tape.leaf(ps.values());
  Tensor eps(Vector::LinSpaced(8, 0.1, 0.9));
  CviCoefficients c = ops.evaluate(ps, flat, eps);
  CHECK(c.d_eff.value().minCoeff() > 0.0);
  CHECK(c.k.value().minCoeff() > 0.0);
  CHECK(c.s_v.size() == 8);
  Vector g = tape.backward(sum(c.d_eff + c.k + c.s_v)).of(flat);
  CHECK(g.cwiseAbs().maxCoeff() > 0.0);
}
