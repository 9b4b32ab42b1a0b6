#pragma once

/// \file training.hpp
/// Hybrid models, autoregressive rollouts, the snapshot-matching loss, Adam
/// and the training loop.

#include "imdiff/implicit_layer.hpp"
#include "imdiff/neural_fields.hpp"
#include "imdiff/params.hpp"
#include "imdiff/pde_models.hpp"
#include "imdiff/reference_data.hpp"
#include "imdiff/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace imdiff {

enum class Stepper { ImplicitCN, ExplicitEuler, ExplicitRK4, NaiveUnrolled };

std::string to_string(Stepper s);
Stepper stepper_from_string(const std::string& s);

/// Raised when a state leaves the divergence bound.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, long step) : NumericalError(what), step(step) {}
  long step;
};

/// A semi-discrete system du/dt = rhs(u, coefficients(theta, t)).  The
/// coefficient vector is packed; rhs unpacks it.
struct HybridModel {
  std::shared_ptr<ParamSet> params = std::make_shared<ParamSet>();
  Index state_size = 0;
  bool time_dependent = false;
  std::function<Tensor(const Tensor& flat, double t)> coefficients;
  std::function<Tensor(const Tensor& u, const Tensor& coeff)> rhs;
  /// Latent physical fields (e.g. ux, uy or nu) for error reporting.
  std::function<std::vector<Tensor>(const Tensor& flat, double t)> fields;
};

/// Where advection velocities come from.
enum class VelocitySource { Truth, Neural };

struct AdvDiffModelOptions {
  VelocitySource velocity = VelocitySource::Neural;
  CosineFieldSpec truth_ux;
  CosineFieldSpec truth_uy;
  double velocity_scale = 1.0;  ///< truth velocity = scale * f(x, t)
  bool dynamic = false;         ///< time-varying velocity (truth omega != 0, CNF conditioned on t)
  bool learn_k = false;
  double k = 0.02;              ///< fixed diffusivity, or initial guess when learned
  CnfConfig cnf{};
};

HybridModel make_advdiff_model(const Grid2D& grid, const AdvDiffModelOptions& options, std::uint64_t seed);
/// Ground-truth velocity fields (ux, uy) at time t.
std::pair<Vector, Vector> truth_velocity(const Grid2D& grid, const AdvDiffModelOptions& options, double t);

struct BurgersModelOptions {
  bool neural_viscosity = true;
  CosineFieldSpec truth_nu;
  double nu0 = 0.01;  ///< truth nu = nu0 (1 + 0.5 f / bound(f))
  CnfConfig cnf{};
};

HybridModel make_burgers_model(const Grid2D& grid, const BurgersModelOptions& options, std::uint64_t seed);
Vector truth_viscosity(const Grid2D& grid, const BurgersModelOptions& options);

struct RolloutConfig {
  Stepper stepper = Stepper::ImplicitCN;
  double dt = 1e-2;
  double t_end = 0.05;
  double t_start = 0.0;      ///< time of the initial state; t_end is measured from here
  int checkpoint_every = 0;  ///< steps per checkpointed segment, 0 = off
  int k_fixed = 8;           ///< naive-unrolled iterations per step
  ImplicitOptions implicit{};
  double divergence_threshold = 1e6;

  long steps() const;  ///< t_end / dt, validated to be integral within 1e-9
};

/// States at the recorded steps; with tracked inputs they live on the tape.
struct Trajectory {
  std::vector<long> steps;
  std::vector<double> times;
  std::vector<Tensor> states;
  std::shared_ptr<SolverLog> log;

  const Tensor& at_time(double t) const;
};

/// Step index for time t, or an exception naming t when it is not on the
/// dt grid within 1e-9.
long step_for_time(double t, double dt);

/// Advances \p ic to t_end.  \p record_times selects the returned states
/// (empty = every step).  Checkpointed segments end at recorded steps.
Trajectory rollout(const HybridModel& model, const Tensor& ic, const Tensor& flat, const RolloutConfig& config,
                   const std::vector<double>& record_times = {});

struct LossSpec {
  double data_weight = 1.0;
  double reg_weight = 1e-6;
  bool include_initial = false;  ///< include the t = 0 snapshot in the data term
};

/// sum over snapshots of mean squared error, plus reg_weight * ||theta_nn||^2.
Tensor total_loss(const Trajectory& trajectory, const SnapshotDataset& data, const ParamSet& params,
                  const Tensor& flat, const LossSpec& spec);

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Vector m;
  Vector v;
  long t = 0;
  long skipped = 0;
};

/// One bias-corrected Adam update.  Non-finite gradients skip the update and
/// return false.
bool adam_step(Vector& params, const Vector& grad, AdamState& state);

struct L1Error {
  double value = 0.0;
  bool absolute = false;  ///< truth had zero L1 norm; value is the mean absolute error
};

/// sum |pred - truth| / sum |truth|
L1Error relative_error_l1(const Vector& pred, const Vector& truth);

struct MemoryReport {
  std::size_t peak_nodes = 0;
  std::size_t peak_stored_scalars = 0;
  double seconds = 0.0;
};

MemoryReport memory_report(const Tape& tape, double seconds);

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double state_l1 = 0.0;
  double field_l1 = 0.0;
  std::size_t peak_nodes = 0;
  std::size_t peak_scalars = 0;
  double seconds = 0.0;
};

struct TrainConfig {
  int epochs = 100;
  int start_epoch = 0;
  RolloutConfig rollout{};
  LossSpec loss{};
  AdamState adam{};
  /// Relative L1 error of the latent fields for the current parameters.
  std::function<double(const Vector& params)> field_error;
  std::function<void(const EpochMetrics&)> on_epoch;
  int max_bad_epochs = 5;
};

struct TrainResult {
  Vector params;
  AdamState adam;
  std::vector<EpochMetrics> log;
};

/// Epoch = one pass over \p data with one Adam update per trajectory.
TrainResult train(HybridModel& model, const std::vector<SnapshotDataset>& data, TrainConfig config);

/// Relative L1 state error of a rollout from data.fields[0] against every
/// snapshot after t = 0 (pooled).
double trajectory_error(const HybridModel& model, const Vector& params, const SnapshotDataset& data,
                        const RolloutConfig& config);

// ---------------------------------------------------------------------------
// CVI nested rollout

struct CviRolloutConfig {
  double dt = 0.02;
  int steps = 50;
  double jacobi_tol = 1e-12;
  int jacobi_max_iter = 200000;
  ImplicitOptions implicit{};
};

struct CviRolloutResult {
  Tensor eps;                     ///< final porosity
  std::vector<Tensor> states;     ///< porosity after each step
  std::vector<Vector> history;    ///< porosity after each step (values)
  std::shared_ptr<SolverLog> log;
};

using CviCoefficientFn = std::function<CviCoefficients(const Tensor& flat, const Tensor& eps)>;

/// Each step solves the molarity balance for C with Jacobi inside a single
/// implicit node, then advances porosity explicitly.
CviRolloutResult cvi_rollout(const CviGrid& grid, const CviCoefficientFn& coefficients, const Tensor& eps0,
                             const Tensor& flat, const CviRolloutConfig& config);

}  // namespace imdiff
