#include "imdiff/training.hpp"

#include "imdiff/autodiff.hpp"
#include "imdiff/ops.hpp"

#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

namespace imdiff {
namespace {

double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

struct StepContext {
  HybridModel model;
  RolloutConfig config;
  std::shared_ptr<AdjointWarmStart> warm;
  std::shared_ptr<SolverLog> log;
};

void check_state(const Tensor& u, long step, double threshold) {
  const Vector& v = u.value();
  if (!v.allFinite() || v.cwiseAbs().maxCoeff() > threshold) {
    std::ostringstream os;
    os << "rollout diverged at step " << step << " (max |u| ";
    if (v.allFinite()) {
      os << v.cwiseAbs().maxCoeff();
    } else {
      os << "non-finite";
    }
    os << ", bound " << threshold << ")";
    throw DivergenceError(os.str(), step);
  }
}

Tensor advance(const StepContext& ctx, const Tensor& u, const Tensor& flat, long step) {
  const HybridModel& m = ctx.model;
  const double dt = ctx.config.dt;
  const double t = ctx.config.t_start + static_cast<double>(step) * dt;
  const bool td = m.time_dependent;
  Tensor next;
  switch (ctx.config.stepper) {
    case Stepper::ExplicitEuler:
      next = u + dt * m.rhs(u, m.coefficients(flat, t));
      break;
    case Stepper::ExplicitRK4: {
      const Tensor c0 = m.coefficients(flat, t);
      const Tensor ch = td ? m.coefficients(flat, t + 0.5 * dt) : c0;
      const Tensor c1 = td ? m.coefficients(flat, t + dt) : c0;
      const Tensor k1 = m.rhs(u, c0);
      const Tensor k2 = m.rhs(u + (0.5 * dt) * k1, ch);
      const Tensor k3 = m.rhs(u + (0.5 * dt) * k2, ch);
      const Tensor k4 = m.rhs(u + dt * k3, c1);
      next = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      break;
    }
    case Stepper::ImplicitCN:
    case Stepper::NaiveUnrolled: {
      Tensor theta;
      if (td) {
        std::vector<Tensor> both{m.coefficients(flat, t), m.coefficients(flat, t + dt)};
        theta = concat(both);
      } else {
        theta = m.coefficients(flat, t);
      }
      const Index nc = td ? theta.size() / 2 : theta.size();
      auto rhs = m.rhs;
      TensorResidualFn f = [rhs, dt, td, nc](const Tensor& x, const Tensor& prev, const Tensor& th) {
        const Tensor c0 = td ? slice(th, 0, {nc}) : th;
        const Tensor c1 = td ? slice(th, nc, {nc}) : th;
        return x - prev - (0.5 * dt) * (rhs(x, c1) + rhs(prev, c0));
      };
      if (ctx.config.stepper == Stepper::NaiveUnrolled) {
        next = naive_unrolled_step(f, u, theta, ctx.config.k_fixed);
      } else {
        ImplicitOptions opts = ctx.config.implicit;
        opts.step_index = static_cast<int>(step);
        opts.warm_start = ctx.warm;
        opts.log = ctx.log;
        next = implicit_step(f, u, theta, opts);
      }
      break;
    }
  }
  check_state(next, step + 1, ctx.config.divergence_threshold);
  return next;
}

}  // namespace

std::string to_string(Stepper s) {
  switch (s) {
    case Stepper::ImplicitCN: return "implicit-cn";
    case Stepper::ExplicitEuler: return "explicit-euler";
    case Stepper::ExplicitRK4: return "explicit-rk4";
    case Stepper::NaiveUnrolled: return "naive-unrolled";
  }
  return "unknown";
}

Stepper stepper_from_string(const std::string& s) {
  for (Stepper k : {Stepper::ImplicitCN, Stepper::ExplicitEuler, Stepper::ExplicitRK4, Stepper::NaiveUnrolled})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown stepper '" + s + "'");
}

// ---------------------------------------------------------------------------
// Models

std::pair<Vector, Vector> truth_velocity(const Grid2D& grid, const AdvDiffModelOptions& o, double t) {
  const double tt = o.dynamic ? t : 0.0;
  return {o.velocity_scale * sample_cosine_field(o.truth_ux, grid, tt),
          o.velocity_scale * sample_cosine_field(o.truth_uy, grid, tt)};
}

HybridModel make_advdiff_model(const Grid2D& grid, const AdvDiffModelOptions& o, std::uint64_t seed) {
  HybridModel m;
  const Index n = grid.cells();
  m.state_size = n;
  m.time_dependent = o.dynamic;
  auto params = m.params;
  std::mt19937_64 rng(seed);

  std::shared_ptr<Cnf> cnf;
  const Tensor coords = normalized_cell_centers(grid.nx(), grid.ny());
  if (o.velocity == VelocitySource::Neural) {
    CnfConfig cfg = o.cnf;
    cfg.out_dim = 2;
    cfg.mode = o.dynamic ? FieldMode::Dynamic : FieldMode::Steady;
    cnf = std::make_shared<Cnf>(cfg, *params, "velocity");
    cnf->initialize(*params, rng);
  }
  if (o.learn_k) {
    params->add("k", 1, false);
    params->set("k", Vector::Constant(1, inverse_softplus(o.k)));
  }

  std::shared_ptr<const std::pair<Vector, Vector>> steady_truth;
  if (o.velocity == VelocitySource::Truth && !o.dynamic) {
    steady_truth = std::make_shared<const std::pair<Vector, Vector>>(truth_velocity(grid, o, 0.0));
  }
  auto velocity = [=](const Tensor& flat, double t) -> std::pair<Tensor, Tensor> {
    if (cnf) {
      auto ch = time_conditioned_field(*cnf, *params, flat, coords, t);
      return {ch[0], ch[1]};
    }
    if (steady_truth) return {Tensor(steady_truth->first), Tensor(steady_truth->second)};
    auto v = truth_velocity(grid, o, t);
    return {Tensor(std::move(v.first)), Tensor(std::move(v.second))};
  };
  const bool learn_k = o.learn_k;
  const double k_fixed = o.k;
  auto diffusivity = [=](const Tensor& flat) -> Tensor {
    if (learn_k) return softplus(params->view(flat, "k"));
    return Tensor(Vector::Constant(1, k_fixed));
  };
  m.coefficients = [=](const Tensor& flat, double t) {
    auto [ux, uy] = velocity(flat, t);
    std::vector<Tensor> parts{ux, uy, diffusivity(flat)};
    return concat(parts);
  };
  m.rhs = [grid, n](const Tensor& u, const Tensor& c) {
    CoeffFields cf{slice(c, 0, {n}), slice(c, n, {n}), slice(c, 2 * n, {1})};
    return advdiff_rhs(grid, u, cf);
  };
  m.fields = [=](const Tensor& flat, double t) {
    auto [ux, uy] = velocity(flat, t);
    return std::vector<Tensor>{ux, uy};
  };
  return m;
}

Vector truth_viscosity(const Grid2D& grid, const BurgersModelOptions& o) {
  const Vector f = sample_cosine_field(o.truth_nu, grid, 0.0);
  const double b = o.truth_nu.bound();
  return o.nu0 * (1.0 + 0.5 * f.array() / (b > 0.0 ? b : 1.0)).matrix();
}

HybridModel make_burgers_model(const Grid2D& grid, const BurgersModelOptions& o, std::uint64_t seed) {
  HybridModel m;
  const Index n = grid.cells();
  m.state_size = n;
  auto params = m.params;
  std::mt19937_64 rng(seed);
  std::shared_ptr<Cnf> cnf;
  const Tensor coords = normalized_cell_centers(grid.nx(), grid.ny());
  if (o.neural_viscosity) {
    CnfConfig cfg = o.cnf;
    cfg.out_dim = 1;
    cfg.mode = FieldMode::Steady;
    cfg.softplus = {true};
    if (cfg.offset_init.empty()) cfg.offset_init = {inverse_softplus(o.nu0)};
    cnf = std::make_shared<Cnf>(cfg, *params, "viscosity");
    cnf->initialize(*params, rng);
  }
  const Tensor truth(truth_viscosity(grid, o));
  auto nu = [=](const Tensor& flat) -> Tensor {
    if (cnf) return time_conditioned_field(*cnf, *params, flat, coords, 0.0)[0];
    return truth;
  };
  m.coefficients = [=](const Tensor& flat, double) { return nu(flat); };
  m.rhs = [grid](const Tensor& u, const Tensor& c) { return burgers_rhs(grid, u, c); };
  m.fields = [=](const Tensor& flat, double) { return std::vector<Tensor>{nu(flat)}; };
  return m;
}

// ---------------------------------------------------------------------------
// Rollout

long RolloutConfig::steps() const {
  if (!(dt > 0.0)) throw std::invalid_argument("rollout: dt must be positive");
  const double r = t_end / dt;
  const double m = std::round(r);
  if (std::abs(r - m) > 1e-9 * std::max(1.0, m) || m < 1.0) {
    std::ostringstream os;
    os << "rollout: t_end " << t_end << " is not a positive multiple of dt " << dt;
    throw std::invalid_argument(os.str());
  }
  return static_cast<long>(m);
}

long step_for_time(double t, double dt) {
  const double m = std::round(t / dt);
  if (std::abs(m * dt - t) > 1e-9) {
    std::ostringstream os;
    os << "time " << t << " is not on the rollout grid (dt " << dt << ")";
    throw std::invalid_argument(os.str());
  }
  return static_cast<long>(m);
}

const Tensor& Trajectory::at_time(double t) const {
  for (std::size_t i = 0; i < times.size(); ++i)
    if (std::abs(times[i] - t) <= 1e-9) return states[i];
  std::ostringstream os;
  os << "trajectory has no state at observation time " << t;
  throw std::invalid_argument(os.str());
}

Trajectory rollout(const HybridModel& model, const Tensor& ic, const Tensor& flat, const RolloutConfig& config,
                   const std::vector<double>& record_times) {
  if (ic.size() != model.state_size) {
    throw ShapeError("rollout: initial condition has " + std::to_string(ic.size()) + " entries, model state has " +
                     std::to_string(model.state_size));
  }
  const long n = config.steps();
  std::set<long> record;
  if (record_times.empty()) {
    for (long s = 0; s <= n; ++s) record.insert(s);
  } else {
    for (double t : record_times) {
      const long s = step_for_time(t, config.dt);
      if (s < 0 || s > n) {
        std::ostringstream os;
        os << "rollout: record time " << t << " outside [0, " << config.t_end << "]";
        throw std::invalid_argument(os.str());
      }
      record.insert(s);
    }
  }

  Trajectory traj;
  traj.log = std::make_shared<SolverLog>();
  auto ctx = std::make_shared<const StepContext>(
      StepContext{model, config, std::make_shared<AdjointWarmStart>(), traj.log});
  auto keep = [&](long s, const Tensor& u) {
    if (!record.count(s)) return;
    traj.steps.push_back(s);
    traj.times.push_back(static_cast<double>(s) * config.dt);
    traj.states.push_back(u);
  };

  Tensor u = ic;
  keep(0, u);
  if (config.checkpoint_every <= 0) {
    for (long s = 0; s < n; ++s) {
      u = advance(*ctx, u, flat, s);
      keep(s + 1, u);
    }
    return traj;
  }

  long start = 0;
  for (long s = 1; s <= n; ++s) {
    if (!(s == n || record.count(s) || s % config.checkpoint_every == 0)) continue;
    const long end = s;
    auto segment = [ctx, start, end](std::span<const Tensor> in) {
      Tensor x = in[0];
      for (long k = start; k < end; ++k) x = advance(*ctx, x, in[1], k);
      return x;
    };
    u = checkpoint(segment, {u, flat});
    keep(end, u);
    start = end;
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Loss and optimizer

Tensor total_loss(const Trajectory& trajectory, const SnapshotDataset& data, const ParamSet& params,
                  const Tensor& flat, const LossSpec& spec) {
  Tensor loss = Tensor::scalar(0.0);
  for (std::size_t k = 0; k < data.times.size(); ++k) {
    if (data.times[k] == 0.0 && !spec.include_initial) continue;
    const Tensor& state = trajectory.at_time(data.times[k]);
    loss = loss + spec.data_weight * mean(square(state - Tensor(data.fields[k])));
  }
  if (spec.reg_weight != 0.0) loss = loss + spec.reg_weight * params.regularizer(flat);
  return loss;
}

bool adam_step(Vector& params, const Vector& grad, AdamState& s) {
  if (grad.size() != params.size()) throw ShapeError("adam_step: gradient and parameter sizes differ");
  if (s.m.size() != params.size()) {
    s.m = Vector::Zero(params.size());
    s.v = Vector::Zero(params.size());
  }
  if (!grad.allFinite()) {
    ++s.skipped;
    return false;
  }
  ++s.t;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  params.array() -= s.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
  return true;
}

L1Error relative_error_l1(const Vector& pred, const Vector& truth) {
  if (pred.size() != truth.size()) throw ShapeError("relative_error_l1: size mismatch");
  const double num = (pred - truth).cwiseAbs().sum();
  const double den = truth.cwiseAbs().sum();
  if (den == 0.0) return {truth.size() ? num / static_cast<double>(truth.size()) : 0.0, true};
  return {num / den, false};
}

MemoryReport memory_report(const Tape& tape, double seconds) {
  const TapeStats s = tape.stats();
  return {s.peak_nodes, s.peak_stored_scalars, seconds};
}

double trajectory_error(const HybridModel& model, const Vector& params, const SnapshotDataset& data,
                        const RolloutConfig& config) {
  Trajectory traj = rollout(model, Tensor(data.fields[0]), Tensor(params), config, data.times);
  double num = 0.0, den = 0.0;
  for (std::size_t k = 1; k < data.times.size(); ++k) {
    num += (traj.at_time(data.times[k]).value() - data.fields[k]).cwiseAbs().sum();
    den += data.fields[k].cwiseAbs().sum();
  }
  return den > 0.0 ? num / den : num;
}

TrainResult train(HybridModel& model, const std::vector<SnapshotDataset>& data, TrainConfig config) {
  using clock = std::chrono::steady_clock;
  TrainResult result;
  Vector params = model.params->values();
  AdamState& st = config.adam;
  int consecutive_bad = 0;
  std::string last_error;

  for (int e = 0; e < config.epochs; ++e) {
    const auto t0 = clock::now();
    EpochMetrics em;
    em.epoch = config.start_epoch + e;
    double num = 0.0, den = 0.0;
    for (const SnapshotDataset& sample : data) {
      Tape tape;
      Tensor flat = tape.leaf(params);
      try {
        Trajectory traj = rollout(model, Tensor(sample.fields[0]), flat, config.rollout, sample.times);
        Tensor loss = total_loss(traj, sample, *model.params, flat, config.loss);
        if (!std::isfinite(loss.item())) throw NumericalError("non-finite loss");
        for (std::size_t k = 1; k < sample.times.size(); ++k) {
          num += (traj.at_time(sample.times[k]).value() - sample.fields[k]).cwiseAbs().sum();
          den += sample.fields[k].cwiseAbs().sum();
        }
        Vector grad = tape.backward(loss).of(flat);
        em.loss += loss.item();
        adam_step(params, grad, st);
        consecutive_bad = 0;
      } catch (const NumericalError& err) {
        last_error = err.what();
        if (++consecutive_bad >= config.max_bad_epochs) {
          std::ostringstream os;
          os << "train: " << consecutive_bad << " consecutive non-finite losses, aborting at epoch " << em.epoch
             << " (last error: " << last_error << ")";
          model.params->set_values(params);
          throw NumericalError(os.str());
        }
      }
      const TapeStats ts = tape.stats();
      em.peak_nodes = std::max(em.peak_nodes, ts.peak_nodes);
      em.peak_scalars = std::max(em.peak_scalars, ts.peak_stored_scalars);
    }
    em.state_l1 = den > 0.0 ? num / den : 0.0;
    if (config.field_error) em.field_l1 = config.field_error(params);
    em.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    result.log.push_back(em);
    if (config.on_epoch) config.on_epoch(em);
  }
  model.params->set_values(params);
  result.params = params;
  result.adam = st;
  return result;
}

// ---------------------------------------------------------------------------
// CVI

CviRolloutResult cvi_rollout(const CviGrid& grid, const CviCoefficientFn& coefficients, const Tensor& eps0,
                             const Tensor& flat, const CviRolloutConfig& config) {
  const Index n = grid.n;
  CviRolloutResult res;
  res.log = std::make_shared<SolverLog>();
  auto warm = std::make_shared<AdjointWarmStart>();

  TensorResidualFn f = [grid, n](const Tensor& c, const Tensor& packed, const Tensor&) {
    CviCoefficients co{slice(packed, 0, {n}), slice(packed, n, {n}), slice(packed, 2 * n, {n})};
    return cvi_molarity_residual(grid, c, co);
  };
  const double tol = config.jacobi_tol;
  const int max_iter = config.jacobi_max_iter;
  CustomRootFn jacobi = [grid, n, tol, max_iter](const Vector& x0, const Vector& packed, const Vector&) {
    const Vector d = packed.segment(0, n);
    const Vector ksv = packed.segment(n, n).cwiseProduct(packed.segment(2 * n, n));
    auto r = cvi_molarity_jacobi(grid, d, ksv, x0, tol, max_iter);
    if (!r.report.converged) {
      throw RootFindError("cvi: Jacobi molarity solve did not converge (residual " +
                              std::to_string(r.report.final_residual_norm) + ")",
                          r.x, r.report.final_residual_norm);
    }
    return RootResult{r.x, r.report.iterations, 0, r.report.final_residual_norm};
  };

  Tensor eps = eps0;
  Vector guess = Vector::Constant(n, grid.constants.c_in);
  const Tensor dummy(Vector::Zero(1));
  for (int s = 0; s < config.steps; ++s) {
    CviCoefficients co = coefficients(flat, eps);
    std::vector<Tensor> parts{co.d_eff, co.k, co.s_v};
    Tensor packed = concat(parts);
    ImplicitOptions opts = config.implicit;
    opts.solver = RootSolver::Custom;
    opts.custom_solver = jacobi;
    opts.initial_guess = guess;
    opts.step_index = s;
    opts.warm_start = warm;
    opts.log = res.log;
    Tensor c = implicit_step(f, packed, dummy, opts);
    guess = c.value();
    eps = cvi_porosity_step(grid, eps, c, co, config.dt);
    res.states.push_back(eps);
    res.history.push_back(eps.value());
  }
  res.eps = eps;
  return res;
}

}  // namespace imdiff
