// imdiff command-line harness.
//
//   imdiff generate|train|eval|bench-stability|bench-cost --config PATH
//          [--force] [--seed N] [--out DIR]
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure.

#include "imdiff/experiments.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

constexpr int kConfigError = 2;
constexpr int kNumericalError = 3;

struct Flags {
  std::string config;
  bool force = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::string checkpoint;
};

void add_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "experiment config (JSON)")->required();
  cmd->add_flag("--force", f.force, "overwrite existing outputs (train: start over instead of resuming)");
  cmd->add_option("--seed", f.seed, "override the config seed");
  cmd->add_option("--out", f.out, "override the output directory");
}

int run(const std::string& verb, const Flags& f) {
  using namespace imdiff::exp;
  const ExperimentConfig c = load_config(f.config, Overrides{f.seed, f.out});
  if (verb == "generate") {
    cmd_generate(c, f.force);
    std::cout << "dataset written to " << c.data_path().string() << "\n";
  } else if (verb == "train") {
    const TrainSummary s = cmd_train(c, f.force);
    std::cout << "epochs " << s.start_epoch << " -> " << s.final_epoch << ", train state L1 " << s.train_state_error
              << ", field L1 " << s.field_error << "\n";
  } else if (verb == "eval") {
    const EvalSummary s = cmd_eval(c, f.checkpoint);
    std::cout << "train " << s.train_horizon_error << ", test " << s.test_horizon_error << ", ood "
              << s.ood_horizon_error << ", field " << s.field_error << "\n";
  } else if (verb == "bench-stability") {
    const StabilitySummary s = cmd_bench_stability(c, f.force);
    for (const StabilityRow& r : s.vs_dt)
      std::cout << r.stepper << " dt=" << r.dt << " error=" << (r.diverged ? "diverged" : std::to_string(r.error))
                << "\n";
  } else if (verb == "bench-cost") {
    for (const CostRow& r : cmd_bench_cost(c, f.force))
      std::cout << r.variant << " dt=" << r.dt << " K=" << r.k_fixed << " peak_scalars=" << r.peak_scalars << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"imdiff: implicit differentiable hybrid PDE models"};
  app.require_subcommand(1);
  Flags flags;
  std::string verb;
  for (const char* name : {"generate", "train", "eval", "bench-stability", "bench-cost"}) {
    CLI::App* cmd = app.add_subcommand(name);
    add_flags(cmd, flags);
    if (std::string(name) == "eval") cmd->add_option("--checkpoint", flags.checkpoint, "checkpoint to evaluate");
    cmd->callback([&verb, name] { verb = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    return run(verb, flags);
  } catch (const imdiff::exp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const imdiff::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumericalError;
  } catch (const imdiff::io::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
