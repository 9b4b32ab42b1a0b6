#pragma once

/// \file implicit_layer.hpp
/// Implicit time-stepping layer.  The forward pass solves
/// f(next; prev, theta) = 0 with recording suspended and appends one tape
/// node.  The backward pass solves the adjoint system
///   w^T [df/dnext] = -dL/dnext
/// with BiCGStab, obtaining w^T [df/dnext] from a VJP of the residual, and
/// returns w^T [df/dprev] and w^T [df/dtheta] as the input cotangents.

#include "imdiff/autodiff.hpp"
#include "imdiff/krylov.hpp"
#include "imdiff/rootfind.hpp"
#include "imdiff/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace imdiff {

/// Residual f(next; prev, theta) written with tensor ops.  Must be pure.
using TensorResidualFn = std::function<Tensor(const Tensor& next, const Tensor& prev, const Tensor& theta)>;

enum class RootSolver { NewtonKrylov, FixedPoint, Custom };

/// Forward solver hook for RootSolver::Custom: (initial guess, prev, theta) -> root.
using CustomRootFn = std::function<RootResult(const Vector& x0, const Vector& prev, const Vector& theta)>;

/// Adjoint vector carried between consecutive backward steps of one rollout.
struct AdjointWarmStart {
  Vector w;
};

/// Per-step solver statistics, appended in execution order.
struct SolverLog {
  std::vector<int> forward_iterations;
  std::vector<int> forward_linear_iterations;
  std::vector<int> adjoint_iterations;
};

struct ImplicitOptions {
  RootSolver solver = RootSolver::NewtonKrylov;
  NewtonOptions newton{};
  double fixed_point_tol = 1e-10;
  int fixed_point_max_iter = 2000;
  CustomRootFn custom_solver;

  double adjoint_tol = 1e-8;
  int adjoint_max_iter = 2000;
  std::shared_ptr<AdjointWarmStart> warm_start;
  std::shared_ptr<SolverLog> log;

  /// Initial guess for the root; empty means "start from prev".
  Vector initial_guess;
  int step_index = -1;
};

/// Everything the backward pass needs from one forward step.
struct ImplicitStepContext {
  Vector phi_star;
  Vector phi_prev;
  Vector theta;
  Shape prev_shape;
  Shape theta_shape;
  TensorResidualFn residual;
};

struct ImplicitStepGradients {
  Vector d_prev;   ///< w^T df/dprev
  Vector d_theta;  ///< w^T df/dtheta
  Vector w;        ///< adjoint vector
  SolveReport report;
};

/// Evaluates the tensor residual on plain vectors.
Vector evaluate_residual(const TensorResidualFn& residual, const Vector& next, const Vector& prev, const Vector& theta,
                         const Shape& prev_shape, const Shape& theta_shape);

/// Root solve only (no tape interaction).
RootResult solve_implicit(const TensorResidualFn& residual, const Tensor& prev, const Tensor& theta,
                          const ImplicitOptions& options);

/// One implicit step as a single custom-VJP node.
Tensor implicit_step(const TensorResidualFn& residual, const Tensor& phi_prev, const Tensor& theta,
                     const ImplicitOptions& options = {});

/// Adjoint backward of one implicit step.  \p parent, when given, receives the
/// memory usage of the temporary tape used for the residual VJPs.
ImplicitStepGradients implicit_step_backward(const ImplicitStepContext& ctx, const Vector& cotangent,
                                             const ImplicitOptions& options = {}, Tape* parent = nullptr);

/// Baseline that records K_fixed iterations x <- x - f(x; prev, theta),
/// starting from prev, fully on the tape.  This is Newton's method with the
/// Jacobian approximated by the identity, exact when df/dnext = I.
Tensor naive_unrolled_step(const TensorResidualFn& residual, const Tensor& phi_prev, const Tensor& theta,
                           int k_fixed, double* final_residual_norm = nullptr);

}  // namespace imdiff
