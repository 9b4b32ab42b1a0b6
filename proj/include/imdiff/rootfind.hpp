#pragma once

/// \file rootfind.hpp
/// Nonlinear solvers for f(x; prev, theta) = 0 used by the implicit layer's
/// forward pass.  Both solvers work on plain vectors and never touch a tape.

#include "imdiff/krylov.hpp"
#include "imdiff/tensor.hpp"

#include <functional>
#include <string>

namespace imdiff {

using ResidualFn = std::function<Vector(const Vector& x, const Vector& prev, const Vector& theta)>;

struct RootProblem {
  ResidualFn residual;
  Index dim = 0;

  Vector operator()(const Vector& x, const Vector& prev, const Vector& theta) const;
};

struct RootResult {
  Vector x;
  int iterations = 0;         ///< outer (Newton or fixed-point) iterations
  int linear_iterations = 0;  ///< inner Krylov iterations summed over Newton steps
  double residual_norm = 0.0;
};

/// Thrown when a root solve fails; carries the best iterate seen.
class RootFindError : public NumericalError {
 public:
  RootFindError(const std::string& what, Vector best, double residual_norm)
      : NumericalError(what), best_iterate(std::move(best)), residual_norm(residual_norm) {}

  Vector best_iterate;
  double residual_norm;
};

struct NewtonOptions {
  double tol = 1e-8;           ///< ||f(x*)|| <= tol * max(1, ||f(x0)||)
  double abs_tol = 1e-10;      ///< absolute fallback for near-zero initial residuals
  int max_newton = 50;
  double linear_rtol = 1e-6;   ///< inner BiCGStab tolerance relative to ||f||
  int max_linear = 500;
  int max_halvings = 8;
};

/// Newton-Krylov with matrix-free Jacobian actions J v obtained by forward
/// differences of the residual along v, step size sqrt(eps_mach) (1 + ||x||) / ||v||.
RootResult newton_krylov(const RootProblem& problem, const Vector& x0, const Vector& prev, const Vector& theta,
                         const NewtonOptions& options = {});

/// Iterates x <- g(x) until ||x - g(x)|| <= tol.  Fails when the step norm
/// grows on three consecutive iterations or max_iter is exhausted.
RootResult fixed_point_iterate(const std::function<Vector(const Vector&)>& g, const Vector& x0, double tol,
                               int max_iter);

}  // namespace imdiff
