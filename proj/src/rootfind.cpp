#include "imdiff/rootfind.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace imdiff {

Vector RootProblem::operator()(const Vector& x, const Vector& prev, const Vector& theta) const {
  Vector r = residual(x, prev, theta);
  if (r.size() != dim) {
    throw ShapeError("RootProblem: residual has length " + std::to_string(r.size()) + ", expected " +
                     std::to_string(dim));
  }
  return r;
}

RootResult newton_krylov(const RootProblem& problem, const Vector& x0, const Vector& prev, const Vector& theta,
                         const NewtonOptions& options) {
  if (x0.size() != problem.dim) throw ShapeError("newton_krylov: initial guess has wrong length");
  const double sqrt_eps = std::sqrt(std::numeric_limits<double>::epsilon());

  RootResult out;
  out.x = x0;
  Vector f = problem(out.x, prev, theta);
  double fnorm = f.norm();
  const double target = std::max(options.tol * std::max(1.0, fnorm), options.abs_tol);
  out.residual_norm = fnorm;

  while (fnorm > target) {
    if (!std::isfinite(fnorm)) {
      throw RootFindError("newton_krylov: non-finite residual", out.x, fnorm);
    }
    if (out.iterations >= options.max_newton) {
      std::ostringstream os;
      os << "newton_krylov: no convergence after " << options.max_newton << " iterations (residual " << fnorm
         << ", target " << target << ")";
      throw RootFindError(os.str(), out.x, fnorm);
    }
    const Vector& x = out.x;
    const Vector fx = f;
    const double xnorm = x.norm();
    LinearOperator<double> J{[&](const Vector& v) -> Vector {
                               const double vn = v.norm();
                               if (vn == 0.0) return Vector::Zero(v.size());
                               const double h = sqrt_eps * (1.0 + xnorm) / vn;
                               return (problem(x + h * v, prev, theta) - fx) / h;
                             },
                             problem.dim};
    // Solve J d = -f / ||f|| so the Krylov tolerance is relative to ||f||.
    auto lin = bicgstab(J, Vector(-f / fnorm), Vector::Zero(problem.dim), options.linear_rtol, options.max_linear);
    out.linear_iterations += lin.report.iterations;
    Vector step = lin.x * fnorm;

    bool accepted = false;
    for (int h = 0; h <= options.max_halvings; ++h) {
      Vector trial = x + step;
      Vector ft = problem(trial, prev, theta);
      const double tn = ft.norm();
      if (std::isfinite(tn) && tn < fnorm) {
        out.x = std::move(trial);
        f = std::move(ft);
        fnorm = tn;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    ++out.iterations;
    out.residual_norm = fnorm;
    if (!accepted) {
      std::ostringstream os;
      os << "newton_krylov: step rejected after " << options.max_halvings << " halvings (residual " << fnorm << ")";
      throw RootFindError(os.str(), out.x, fnorm);
    }
  }
  return out;
}

RootResult fixed_point_iterate(const std::function<Vector(const Vector&)>& g, const Vector& x0, double tol,
                               int max_iter) {
  RootResult out;
  out.x = x0;
  Vector gx = g(out.x);
  double res = (out.x - gx).norm();
  out.residual_norm = res;
  int growth = 0;
  while (res > tol) {
    if (!std::isfinite(res)) throw RootFindError("fixed_point_iterate: non-finite iterate", out.x, res);
    if (out.iterations >= max_iter) {
      std::ostringstream os;
      os << "fixed_point_iterate: no convergence after " << max_iter << " iterations (residual " << res << ")";
      throw RootFindError(os.str(), out.x, res);
    }
    out.x = gx;
    gx = g(out.x);
    ++out.iterations;
    const double next = (out.x - gx).norm();
    growth = next > res ? growth + 1 : 0;
    res = next;
    out.residual_norm = res;
    if (growth >= 3) {
      std::ostringstream os;
      os << "fixed_point_iterate: diverging (residual grew 3 consecutive iterations, now " << res << ")";
      throw RootFindError(os.str(), out.x, res);
    }
  }
  return out;
}

}  // namespace imdiff
