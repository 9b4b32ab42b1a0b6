#include "imdiff/implicit_layer.hpp"

#include "imdiff/ops.hpp"

#include <sstream>

namespace imdiff {
namespace {

std::string step_label(int step) { return step >= 0 ? " at step " + std::to_string(step) : std::string(); }

}  // namespace

Vector evaluate_residual(const TensorResidualFn& residual, const Vector& next, const Vector& prev, const Vector& theta,
                         const Shape& prev_shape, const Shape& theta_shape) {
  return residual(Tensor(next), Tensor(prev_shape, prev), Tensor(theta_shape, theta)).value();
}

RootResult solve_implicit(const TensorResidualFn& residual, const Tensor& prev, const Tensor& theta,
                          const ImplicitOptions& options) {
  const Vector x0 = options.initial_guess.size() ? options.initial_guess : prev.value();
  const Shape prev_shape = prev.shape();
  const Shape theta_shape = theta.shape();
  try {
    switch (options.solver) {
      case RootSolver::NewtonKrylov: {
        RootProblem problem{[&](const Vector& x, const Vector& p, const Vector& t) {
                              return evaluate_residual(residual, x, p, t, prev_shape, theta_shape);
                            },
                            x0.size()};
        return newton_krylov(problem, x0, prev.value(), theta.value(), options.newton);
      }
      case RootSolver::FixedPoint: {
        const Vector& p = prev.value();
        const Vector& t = theta.value();
        auto g = [&](const Vector& x) -> Vector {
          return x - evaluate_residual(residual, x, p, t, prev_shape, theta_shape);
        };
        return fixed_point_iterate(g, x0, options.fixed_point_tol, options.fixed_point_max_iter);
      }
      case RootSolver::Custom:
        if (!options.custom_solver) throw std::invalid_argument("implicit_step: custom solver not set");
        return options.custom_solver(x0, prev.value(), theta.value());
    }
  } catch (const RootFindError& e) {
    throw RootFindError(std::string(e.what()) + step_label(options.step_index), e.best_iterate, e.residual_norm);
  }
  throw std::logic_error("solve_implicit: unknown solver");
}

Tensor implicit_step(const TensorResidualFn& residual, const Tensor& phi_prev, const Tensor& theta,
                     const ImplicitOptions& options) {
  std::vector<Tensor> inputs{phi_prev, theta};
  Tape* parent = active_tape(inputs, "implicit_step");

  auto forward = [residual, options](std::span<const Tensor> in) {
    RootResult root = solve_implicit(residual, in[0], in[1], options);
    if (options.log) {
      options.log->forward_iterations.push_back(root.iterations);
      options.log->forward_linear_iterations.push_back(root.linear_iterations);
    }
    return Tensor(std::move(root.x));
  };
  auto backward = [residual, options, parent](const Vector& g, const Tensor& out, std::span<const Tensor> in) {
    ImplicitStepContext ctx{out.value(), in[0].value(), in[1].value(), in[0].shape(), in[1].shape(), residual};
    ImplicitStepGradients grads = implicit_step_backward(ctx, g, options, parent);
    return std::vector<Vector>{std::move(grads.d_prev), std::move(grads.d_theta)};
  };
  return CustomVjp("implicit_step", forward, backward)(std::move(inputs));
}

ImplicitStepGradients implicit_step_backward(const ImplicitStepContext& ctx, const Vector& cotangent,
                                             const ImplicitOptions& options, Tape* parent) {
  if (cotangent.size() != ctx.phi_star.size()) {
    throw ShapeError("implicit_step_backward: cotangent length " + std::to_string(cotangent.size()) +
                     " does not match state size " + std::to_string(ctx.phi_star.size()));
  }
  Tape local(parent);
  Tensor next = local.leaf(ctx.phi_star);
  Tensor prev = local.leaf(Tensor(ctx.prev_shape, ctx.phi_prev));
  Tensor theta = local.leaf(Tensor(ctx.theta_shape, ctx.theta));
  Tensor r = ctx.residual(next, prev, theta);
  if (r.size() != next.size()) {
    throw ShapeError("implicit_step_backward: residual length does not match state size");
  }

  // v -> (v^T df/dnext)^T, i.e. the transposed Jacobian action.
  LinearOperator<double> JT{[&](const Vector& v) -> Vector { return local.vjp(r, v).of(next); }, next.size()};

  Vector w0 = Vector::Zero(next.size());
  if (options.warm_start && options.warm_start->w.size() == next.size()) w0 = options.warm_start->w;
  auto sol = bicgstab(JT, Vector(-cotangent), w0, options.adjoint_tol, options.adjoint_max_iter);
  if (!sol.report.converged) {
    std::ostringstream os;
    os << "implicit_step_backward: adjoint solve did not converge" << step_label(options.step_index) << " (residual "
       << sol.report.final_residual_norm << " after " << sol.report.iterations << " iterations)";
    throw NumericalError(os.str());
  }
  if (options.warm_start) options.warm_start->w = sol.x;
  if (options.log) options.log->adjoint_iterations.push_back(sol.report.iterations);

  GradMap g = local.vjp(r, sol.x);
  return ImplicitStepGradients{g.of(prev), g.of(theta), std::move(sol.x), sol.report};
}

Tensor naive_unrolled_step(const TensorResidualFn& residual, const Tensor& phi_prev, const Tensor& theta,
                           int k_fixed, double* final_residual_norm) {
  if (k_fixed < 1) throw std::invalid_argument("naive_unrolled_step: K_fixed must be >= 1");
  Tensor x = phi_prev;
  for (int k = 0; k < k_fixed; ++k) x = x - residual(x, phi_prev, theta);
  if (final_residual_norm) {
    Tape* tape = active_tape(std::vector<Tensor>{x}, "naive_unrolled_step");
    if (tape) {
      Tape::Pause pause(*tape);
      *final_residual_norm = residual(x, phi_prev, theta).value().norm();
    } else {
      *final_residual_norm = residual(x, phi_prev, theta).value().norm();
    }
  }
  return x;
}

}  // namespace imdiff
