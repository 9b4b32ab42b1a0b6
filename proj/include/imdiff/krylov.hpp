#pragma once

/// \file krylov.hpp
/// Matrix-free iterative linear solvers.  Every solver touches the operator
/// only through LinearOperator::apply.
///
/// Convergence is declared on the true residual: ||b - A x|| <= tol * max(1, ||b||).

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace imdiff {

template <typename Scalar>
using DenseVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Right-hand sides and initial guesses do not take part in deduction, so
// Eigen expressions may be passed directly.
template <typename Scalar>
using VectorArg = std::type_identity_t<DenseVector<Scalar>>;

template <typename Scalar = double>
struct LinearOperator {
  std::function<DenseVector<Scalar>(const DenseVector<Scalar>&)> apply;
  Eigen::Index dim = 0;

  DenseVector<Scalar> operator()(const DenseVector<Scalar>& v) const {
    if (v.size() != dim) {
      throw std::invalid_argument("LinearOperator: input length " + std::to_string(v.size()) +
                                  " does not match dim " + std::to_string(dim));
    }
    DenseVector<Scalar> y = apply(v);
    if (y.size() != dim) {
      throw std::invalid_argument("LinearOperator: output length " + std::to_string(y.size()) +
                                  " does not match dim " + std::to_string(dim));
    }
    return y;
  }
};

/// Wraps a dense matrix; used by tests and small direct comparisons.
template <typename Derived>
LinearOperator<typename Derived::Scalar> make_operator(const Eigen::MatrixBase<Derived>& A) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> M = A;
  return {[M](const DenseVector<Scalar>& v) -> DenseVector<Scalar> { return M * v; }, M.rows()};
}

struct SolveReport {
  int iterations = 0;
  double final_residual_norm = 0.0;
  bool converged = false;
  int restarts = 0;
};

template <typename Scalar>
struct SolveResult {
  DenseVector<Scalar> x;
  SolveReport report;
};

namespace detail {

template <typename Scalar>
void check_solve_args(const LinearOperator<Scalar>& A, const DenseVector<Scalar>& b, const DenseVector<Scalar>& x0,
                      double tol, const char* who) {
  if (b.size() != A.dim || x0.size() != A.dim) {
    throw std::invalid_argument(std::string(who) + ": dimension mismatch (dim " + std::to_string(A.dim) +
                                ", b " + std::to_string(b.size()) + ", x0 " + std::to_string(x0.size()) + ")");
  }
  if (!(tol > 0.0)) throw std::invalid_argument(std::string(who) + ": tol must be positive");
}

template <typename Scalar>
double threshold(const DenseVector<Scalar>& b, double tol) {
  return tol * std::max(1.0, static_cast<double>(b.norm()));
}

}  // namespace detail

/// Stabilized biconjugate gradients for general nonsingular A.  On breakdown
/// (rho or omega vanishing) the iteration restarts once from the current
/// iterate; a second breakdown returns a non-converged report.
template <typename Scalar>
SolveResult<Scalar> bicgstab(const LinearOperator<Scalar>& A, const VectorArg<Scalar>& b,
                             const VectorArg<Scalar>& x0, double tol, int max_iter) {
  using Vec = DenseVector<Scalar>;
  detail::check_solve_args(A, b, x0, tol, "bicgstab");
  const double target = detail::threshold(b, tol);
  constexpr double tiny = std::numeric_limits<double>::min() * 1e10;

  SolveResult<Scalar> out{x0, {}};
  Vec& x = out.x;
  SolveReport& rep = out.report;
  Vec r = b - A(x);
  rep.final_residual_norm = static_cast<double>(r.norm());
  if (rep.final_residual_norm <= target) {
    rep.converged = true;
    return out;
  }

  int breakdowns = 0;
  while (rep.iterations < max_iter) {
    // (Re)start from the current residual.
    const Vec r_hat = r;
    Scalar rho = 1, alpha = 1, omega = 1;
    Vec v = Vec::Zero(A.dim), p = Vec::Zero(A.dim);
    bool restart = false;

    while (rep.iterations < max_iter) {
      const Scalar rho_next = r_hat.dot(r);
      if (std::abs(static_cast<double>(rho_next)) < tiny || std::abs(static_cast<double>(omega)) < tiny) {
        restart = true;
        break;
      }
      const Scalar beta = (rho_next / rho) * (alpha / omega);
      rho = rho_next;
      p = r + beta * (p - omega * v);
      v = A(p);
      const Scalar denom = r_hat.dot(v);
      if (std::abs(static_cast<double>(denom)) < tiny) {
        restart = true;
        break;
      }
      alpha = rho / denom;
      Vec s = r - alpha * v;
      ++rep.iterations;
      if (static_cast<double>(s.norm()) <= target) {
        x += alpha * p;
        r = b - A(x);
        rep.final_residual_norm = static_cast<double>(r.norm());
        if (rep.final_residual_norm <= target) {
          rep.converged = true;
          return out;
        }
        break;  // recursive residual drifted; restart from the true residual
      }
      const Vec t = A(s);
      const Scalar tt = t.dot(t);
      omega = std::abs(static_cast<double>(tt)) < tiny ? Scalar(0) : t.dot(s) / tt;
      x += alpha * p + omega * s;
      r = s - omega * t;
      rep.final_residual_norm = static_cast<double>(r.norm());
      if (rep.final_residual_norm <= target) {
        r = b - A(x);
        rep.final_residual_norm = static_cast<double>(r.norm());
        if (rep.final_residual_norm <= target) {
          rep.converged = true;
          return out;
        }
        break;
      }
    }
    if (restart) {
      if (++breakdowns > 1) break;
      ++rep.restarts;
      r = b - A(x);
      rep.final_residual_norm = static_cast<double>(r.norm());
    }
  }
  rep.final_residual_norm = static_cast<double>((b - A(x)).norm());
  rep.converged = rep.final_residual_norm <= target;
  return out;
}

/// Conjugate gradients; A must be symmetric positive definite (caller's contract).
template <typename Scalar>
SolveResult<Scalar> conjugate_gradient(const LinearOperator<Scalar>& A, const VectorArg<Scalar>& b,
                                       const VectorArg<Scalar>& x0, double tol, int max_iter) {
  using Vec = DenseVector<Scalar>;
  detail::check_solve_args(A, b, x0, tol, "conjugate_gradient");
  const double target = detail::threshold(b, tol);

  SolveResult<Scalar> out{x0, {}};
  Vec& x = out.x;
  SolveReport& rep = out.report;
  Vec r = b - A(x);
  rep.final_residual_norm = static_cast<double>(r.norm());
  if (rep.final_residual_norm <= target) {
    rep.converged = true;
    return out;
  }
  Vec p = r;
  Scalar rr = r.dot(r);
  while (rep.iterations < max_iter) {
    const Vec Ap = A(p);
    const Scalar pAp = p.dot(Ap);
    if (!(std::abs(static_cast<double>(pAp)) > 0.0)) break;
    const Scalar alpha = rr / pAp;
    x += alpha * p;
    r -= alpha * Ap;
    ++rep.iterations;
    rep.final_residual_norm = static_cast<double>(r.norm());
    if (rep.final_residual_norm <= target) {
      r = b - A(x);
      rep.final_residual_norm = static_cast<double>(r.norm());
      if (rep.final_residual_norm <= target) {
        rep.converged = true;
        return out;
      }
    }
    const Scalar rr_next = r.dot(r);
    p = r + (rr_next / rr) * p;
    rr = rr_next;
  }
  rep.final_residual_norm = static_cast<double>((b - A(x)).norm());
  rep.converged = rep.final_residual_norm <= target;
  return out;
}

/// Point-Jacobi iteration x <- D^{-1} (b - R x) for A = D + R.
template <typename Scalar>
SolveResult<Scalar> jacobi_iterate(const DenseVector<Scalar>& diagonal,
                                   const std::function<DenseVector<Scalar>(const DenseVector<Scalar>&)>& offdiag,
                                   const DenseVector<Scalar>& b, const DenseVector<Scalar>& x0, double tol,
                                   int max_iter) {
  using Vec = DenseVector<Scalar>;
  const Eigen::Index n = diagonal.size();
  if (b.size() != n || x0.size() != n) throw std::invalid_argument("jacobi_iterate: dimension mismatch");
  if (!(tol > 0.0)) throw std::invalid_argument("jacobi_iterate: tol must be positive");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (diagonal[i] == Scalar(0)) {
      throw std::invalid_argument("jacobi_iterate: zero diagonal entry at row " + std::to_string(i));
    }
  }
  const double target = detail::threshold(b, tol);

  SolveResult<Scalar> out{x0, {}};
  Vec& x = out.x;
  SolveReport& rep = out.report;
  Vec Rx = offdiag(x);
  rep.final_residual_norm = static_cast<double>((b - diagonal.cwiseProduct(x) - Rx).norm());
  if (rep.final_residual_norm <= target) {
    rep.converged = true;
    return out;
  }
  while (rep.iterations < max_iter) {
    x = (b - Rx).cwiseQuotient(diagonal);
    ++rep.iterations;
    Rx = offdiag(x);
    rep.final_residual_norm = static_cast<double>((b - diagonal.cwiseProduct(x) - Rx).norm());
    if (!std::isfinite(rep.final_residual_norm)) break;
    if (rep.final_residual_norm <= target) {
      rep.converged = true;
      return out;
    }
  }
  return out;
}

}  // namespace imdiff
