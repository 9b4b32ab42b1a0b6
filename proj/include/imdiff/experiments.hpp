#pragma once

/// \file experiments.hpp
/// Experiment configuration and the commands behind the imdiff CLI:
/// generate, train, eval, bench-stability and bench-cost.  Every command is
/// deterministic given the configuration and its seed.

#include "imdiff/io.hpp"
#include "imdiff/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace imdiff::exp {

namespace fs = std::filesystem;
using nlohmann::json;

/// Invalid configuration, refused overwrite, or config/dataset mismatch.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Case { AdvDiffSteady, AdvDiffDynamic, Burgers, Cvi };
std::string to_string(Case c);
Case case_from_string(const std::string& s);

struct IcConfig {
  int coarse_nx = 30;
  int coarse_ny = 10;
  double length_scale_min = 0.2;  ///< training ICs spread evenly over [min, max], test ICs drawn uniformly
  double length_scale_max = 0.5;
  double variance = 1.0;
  double mean = 0.0;
};

struct TruthConfig {
  int n_waves = 4;
  double velocity_scale = 1.0;
  double k = 0.02;
  double nu0 = 0.01;
  double cvi_d0 = 1.0;
  double cvi_k0 = 1.0;
  double cvi_s0 = 4.0;
};

struct CnfSettings {
  std::vector<Index> hyper_hidden{64, 64};
  Index latent_dim = 16;
  std::vector<Index> siren_hidden{32, 32};
  double omega0 = 30.0;
  double projector_init_scale = 1e-2;
};

struct SolverSettings {
  double newton_tol = 1e-8;
  double newton_abs_tol = 1e-10;
  double linear_rtol = 1e-6;
  int max_newton = 50;
  double adjoint_tol = 1e-8;
};

struct BenchSettings {
  std::vector<double> dts{1e-3, 2e-3, 5e-3, 1e-2, 2e-2};
  std::vector<std::string> steppers{"explicit-euler", "implicit-cn"};
  double t_end = 0.4;
  double record_every = 0.02;  ///< error-vs-time sampling interval
  int ref_refine = 4;
  double ic_length_scale = 0.3;
  // cost study
  double cost_t_end = 0.05;
  double im_dt = 2e-3;
  double ex_dt = 1e-4;
  std::vector<int> k_values{4, 8, 16, 32};
  int cost_checkpoint_every = 5;
  std::vector<double> cost_dts{1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2};
};

struct CviSettings {
  int n = 32;
  int steps = 50;
  double dt = 0.02;
  int hidden = 16;
  std::vector<int> snapshot_steps{10, 20, 30, 40, 50};
  double eps0_min = 0.5;
  double eps0_max = 0.8;
  double q = 0.5;
};

struct ExperimentConfig {
  Case kind = Case::AdvDiffSteady;
  std::uint64_t seed = 7;
  std::string out_dir = "runs/out";
  std::string data_dir;  ///< empty = <out_dir>/data

  int nx = 32;
  int ny = 16;
  double lx = 2.0;
  double ly = 1.0;
  int ref_refine = 1;  ///< reference solved on a grid refined by this factor, then averaged
  double dt_ref = 1e-3;

  double dt = 1e-2;
  Stepper stepper = Stepper::ImplicitCN;
  int checkpoint_every = 0;
  int k_fixed = 8;

  int epochs = 2000;
  double lr = 1e-3;
  double reg_weight = 1e-6;
  int save_every = 100;
  bool learn_k = false;

  int n_train = 8;
  int n_test = 2;
  std::vector<double> ood_length_scales{0.12, 0.8};
  std::vector<double> train_times;
  std::vector<double> eval_times;

  IcConfig ic;
  TruthConfig truth;
  CnfSettings cnf;
  SolverSettings solver;
  BenchSettings bench;
  CviSettings cvi;

  fs::path out_path() const { return out_dir; }
  fs::path data_path() const { return data_dir.empty() ? fs::path(out_dir) / "data" : fs::path(data_dir); }
};

/// Case-specific defaults (snapshot times, horizon, dt).
ExperimentConfig default_config(Case kind);

/// Builds a config from JSON.  "case" is required; every other key is
/// optional.  Unknown keys and invalid values raise ConfigError naming the key.
ExperimentConfig parse_config(const json& j);
json to_json(const ExperimentConfig& c);

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
};

/// Reads and validates a config file; overrides replace top-level keys
/// before validation.
ExperimentConfig load_config(const fs::path& path, const Overrides& overrides = {});

/// Validation performed by parse_config; exposed for configs built in code.
void validate(const ExperimentConfig& c);

// ---------------------------------------------------------------------------
// Cases

/// Deterministic sub-seed for a named purpose.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose);

struct CaseSetup {
  Grid2D grid{4, 4};
  AdvDiffModelOptions advdiff;
  BurgersModelOptions burgers;
};

CaseSetup make_setup(const ExperimentConfig& c, Index refine = 1);
/// Ground-truth coefficient model on the (possibly refined) grid.
HybridModel make_truth_model(const ExperimentConfig& c, Index refine = 1);
/// Trainable model on the model grid; parameters initialised from the seed.
HybridModel make_learned_model(const ExperimentConfig& c);
/// Ground-truth latent fields at time t, in the order HybridModel::fields uses.
std::vector<Vector> truth_fields(const ExperimentConfig& c, double t);

struct Sample {
  std::string id;
  std::string split;  ///< train, test or ood
  double length_scale = 0.0;
  std::uint64_t ic_seed = 0;
  std::vector<double> times;
  std::vector<Vector> fields;

  SnapshotDataset subset(const std::vector<double>& times, Index nx, Index ny) const;
};

struct Dataset {
  Index nx = 0;
  Index ny = 0;
  std::vector<double> train_times;
  std::vector<double> eval_times;
  std::vector<Sample> samples;

  std::vector<SnapshotDataset> training_set() const;
};

/// Reference data for every sample at the union of train and eval times.
Dataset generate_dataset(const ExperimentConfig& c);
void write_dataset(const ExperimentConfig& c, const Dataset& d, const fs::path& dir);
Dataset read_dataset(const ExperimentConfig& c, const fs::path& dir);

// ---------------------------------------------------------------------------
// Commands

inline const io::CsvRow kMetricHeader{"epoch",        "loss",        "state_l1_error", "field_l1_error",
                                      "peak_nodes",   "peak_scalars", "epoch_seconds"};

struct TrainSummary {
  int start_epoch = 0;
  int final_epoch = 0;
  double final_loss = 0.0;
  double train_state_error = 0.0;  ///< final parameters, training snapshots
  double field_error = 0.0;
  Vector params;
};

struct EvalRow {
  std::string sample;
  std::string split;
  double length_scale = 0.0;
  double time = 0.0;
  double state_error = 0.0;
};

struct EvalSummary {
  std::vector<EvalRow> rows;
  double train_state_error = 0.0;  ///< training snapshots, as reported by train
  double train_horizon_error = 0.0;
  double test_horizon_error = 0.0;
  double ood_horizon_error = 0.0;
  double field_error = 0.0;
  double gradient_sign_agreement = 0.0;  ///< scalar fields only (burgers)
};

struct StabilityRow {
  std::string stepper;
  double dt = 0.0;
  double time = 0.0;
  double error = 0.0;
  bool diverged = false;
};

struct StabilitySummary {
  std::vector<StabilityRow> vs_time;
  std::vector<StabilityRow> vs_dt;  ///< final time only
};

struct CostRow {
  std::string variant;
  std::string stepper;
  double dt = 0.0;
  int k_fixed = 0;
  int checkpoint_every = 0;
  long steps = 0;
  std::size_t peak_nodes = 0;
  std::size_t peak_scalars = 0;
  double seconds = 0.0;
  double error = 0.0;
};

/// Sentinel error value recorded for diverged runs.
inline constexpr double kDivergedError = -1.0;

void cmd_generate(const ExperimentConfig& c, bool force);
TrainSummary cmd_train(const ExperimentConfig& c, bool force);
EvalSummary cmd_eval(const ExperimentConfig& c, const fs::path& checkpoint = {});
StabilitySummary cmd_bench_stability(const ExperimentConfig& c, bool force);
std::vector<CostRow> cmd_bench_cost(const ExperimentConfig& c, bool force);

/// Fraction of cells where the discrete gradients of a and b have a positive
/// dot product (periodic central differences).
double gradient_sign_agreement(const Grid2D& grid, const Vector& a, const Vector& b);

}  // namespace imdiff::exp
