#include "doctest.h"
#include "imdiff/experiments.hpp"
#include "test_util.hpp"

#include <cstdlib>
#include <fstream>
#include <unistd.h>

using namespace imdiff;
using namespace imdiff::exp;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("imdiff_test_exp_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json small_json(const std::string& kind, const fs::path& out) {
  json j = {{"case", kind},
            {"out_dir", out.string()},
            {"nx", 8},
            {"ny", 4},
            {"ic", {{"coarse_nx", 4}, {"coarse_ny", 2}}},
            {"epochs", 6},
            {"save_every", 3},
            {"n_train", 2},
            {"n_test", 1},
            {"ood_length_scales", {0.15}},
            {"cnf", {{"hyper_hidden", {8}}, {"latent_dim", 3}, {"siren_hidden", {8}}, {"omega0", 5.0}}}};
  if (kind == "cvi") {
    j.erase("ood_length_scales");
    j["cvi"] = {{"n", 8}, {"steps", 10}, {"snapshot_steps", {5, 10}}, {"hidden", 4}};
  }
  return j;
}

ExperimentConfig small(const std::string& kind, const fs::path& out) { return parse_config(small_json(kind, out)); }

std::string digest_tree(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, dir).string() + "\n" + io::read_file(f);
  return all;
}

fs::path write_config(const fs::path& dir, const json& j) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(1);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(IMDIFF_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("derive_seed is deterministic and purpose dependent") {
  CHECK(derive_seed(7, "a") == derive_seed(7, "a"));
  CHECK(derive_seed(7, "a") != derive_seed(7, "b"));
  CHECK(derive_seed(7, "a") != derive_seed(8, "a"));
}

TEST_CASE("config parsing") {
  SUBCASE("defaults and round trip") {
    const ExperimentConfig c = parse_config({{"case", "advdiff-steady"}});
    CHECK(c.nx == 32);
    CHECK(c.train_times.size() == 2);
    const ExperimentConfig d = parse_config(to_json(c));
    CHECK(to_json(d) == to_json(c));
  }
  SUBCASE("unknown keys are rejected with their path") {
    try {
      parse_config({{"case", "burgers"}, {"cnf", {{"omega", 3.0}}}});
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("cnf.omega") != std::string::npos);
    }
  }
  SUBCASE("invalid values") {
    CHECK_THROWS_AS(parse_config(json::object()), ConfigError);
    CHECK_THROWS_AS(parse_config({{"case", "heat"}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"case", "burgers"}, {"nx", -1}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"case", "burgers"}, {"nx", "8"}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"case", "burgers"}, {"train_times", {0.0, 0.105}}}), ConfigError);
    CHECK_THROWS_AS(parse_config({{"case", "burgers"}, {"stepper", "rk9"}}), ConfigError);
  }
  SUBCASE("overrides") {
    const fs::path dir = temp_dir("overrides");
    const fs::path p = write_config(dir, {{"case", "burgers"}, {"seed", 1}});
    const ExperimentConfig c = load_config(p, Overrides{42, std::string("elsewhere")});
    CHECK(c.seed == 42);
    CHECK(c.out_dir == "elsewhere");
    CHECK_THROWS_AS(load_config(dir / "missing.json"), ConfigError);
  }
}

TEST_CASE("generate is deterministic and refuses to overwrite") {
  const fs::path a = temp_dir("gen_a"), b = temp_dir("gen_b");
  cmd_generate(small("advdiff-steady", a), false);
  cmd_generate(small("advdiff-steady", b), false);
  CHECK(digest_tree(a / "data") == digest_tree(b / "data"));
  CHECK_THROWS_AS(cmd_generate(small("advdiff-steady", a), false), ConfigError);
  CHECK_NOTHROW(cmd_generate(small("advdiff-steady", a), true));

  json j = small_json("advdiff-steady", a);
  j["seed"] = 8;
  const fs::path c = temp_dir("gen_c");
  j["out_dir"] = c.string();
  cmd_generate(parse_config(j), false);
  CHECK(digest_tree(a / "data") != digest_tree(c / "data"));

  const Dataset d = read_dataset(small("advdiff-steady", a), a / "data");
  CHECK(d.samples.size() == 4);  // 2 train, 1 test, 1 ood
  CHECK(d.samples.front().fields.front().size() == 32);
}

TEST_CASE("training resumes and eval reproduces the training error") {
  const fs::path dir = temp_dir("train");
  json j = small_json("advdiff-steady", dir);
  cmd_generate(parse_config(j), false);

  j["epochs"] = 3;
  const TrainSummary first = cmd_train(parse_config(j), false);
  CHECK(first.start_epoch == 0);
  CHECK(first.final_epoch == 3);
  j["epochs"] = 6;
  const TrainSummary resumed = cmd_train(parse_config(j), false);
  CHECK(resumed.start_epoch == 3);
  CHECK(resumed.final_epoch == 6);

  const fs::path straight_dir = temp_dir("train_straight");
  fs::copy(dir / "data", straight_dir / "data", fs::copy_options::recursive);
  json k = j;
  k["out_dir"] = straight_dir.string();
  const TrainSummary straight = cmd_train(parse_config(k), false);
  CHECK(test::rel_diff(resumed.params, straight.params) <= 1e-12);

  const auto rows = io::parse_csv(io::read_file(dir / "metrics.csv"));
  REQUIRE(rows.size() == 7);
  CHECK(rows.front() == kMetricHeader);
  for (int e = 0; e < 6; ++e) CHECK(rows[static_cast<std::size_t>(e) + 1][0] == std::to_string(e));

  const EvalSummary ev = cmd_eval(parse_config(j));
  CHECK(test::rel_diff(ev.train_state_error, resumed.train_state_error) <= 1e-12);
  CHECK(fs::exists(dir / "eval_errors.csv"));
  CHECK(fs::exists(dir / "eval_summary.json"));

  json changed = j;
  changed["cnf"]["latent_dim"] = 4;
  CHECK_THROWS_AS(cmd_eval(parse_config(changed)), ConfigError);
  changed = j;
  changed["nx"] = 16;
  CHECK_THROWS_AS(cmd_train(parse_config(changed), false), ConfigError);
}

TEST_CASE("cvi pipeline runs") {
  const fs::path dir = temp_dir("cvi");
  const ExperimentConfig c = small("cvi", dir);
  cmd_generate(c, false);
  const TrainSummary t = cmd_train(c, false);
  CHECK(t.final_epoch == 6);
  CHECK(std::isfinite(t.final_loss));
  const EvalSummary e = cmd_eval(c);
  CHECK(std::isfinite(e.train_horizon_error));
}

TEST_CASE("gradient sign agreement") {
  Grid2D g(8, 4);
  Vector a(32);
  for (Index j = 0; j < 4; ++j)
    for (Index i = 0; i < 8; ++i) a[i + 8 * j] = std::sin(2 * M_PI * (i + 0.5) / 8) + 0.3 * std::cos(2 * M_PI * j / 4.0);
  CHECK(gradient_sign_agreement(g, a, a) == 1.0);
  CHECK(gradient_sign_agreement(g, a, 2.0 * a + Vector::Constant(32, 1.0)) == 1.0);
  CHECK(gradient_sign_agreement(g, a, -a) == 0.0);
}

TEST_CASE("cli exit codes") {
  const fs::path dir = temp_dir("cli");
  json j = small_json("advdiff-steady", dir / "run");
  j["epochs"] = 2;
  j["bench"] = {{"dts", {1e-3, 1e-2}}, {"t_end", 0.04}, {"ref_refine", 2},      {"cost_dts", {1e-3, 1e-2}},
                {"k_values", {2, 4}},  {"ex_dt", 5e-4}, {"cost_t_end", 0.02}};
  const std::string cfg = "--config " + write_config(dir, j).string();

  CHECK(run_cli("generate " + cfg) == 0);
  CHECK(run_cli("generate " + cfg) == 2);
  CHECK(run_cli("generate " + cfg + " --force") == 0);
  CHECK(run_cli("train " + cfg) == 0);
  CHECK(run_cli("eval " + cfg) == 0);
  CHECK(run_cli("bench-stability " + cfg) == 0);
  CHECK(run_cli("bench-cost " + cfg) == 0);
  CHECK(fs::exists(dir / "run" / "bench_cost.csv"));
  CHECK(run_cli("generate " + cfg + " --seed 3 --out " + (dir / "other").string()) == 0);
  CHECK(fs::exists(dir / "other" / "data" / "manifest.json"));

  CHECK(run_cli("") == 2);
  CHECK(run_cli("frobnicate " + cfg) == 2);
  CHECK(run_cli("train") == 2);
  CHECK(run_cli("train --config " + (dir / "missing.json").string()) == 2);
  json bad = j;
  bad["typo_key"] = 1;
  const fs::path bad_dir = temp_dir("cli_bad");
  CHECK(run_cli("train --config " + write_config(bad_dir, bad).string()) == 2);

  // A blow-up in the explicit stepper surfaces as a numerical failure.
  json blow = j;
  blow["out_dir"] = (dir / "blow").string();
  blow["stepper"] = "explicit-euler";
  blow["dt"] = 0.05;
  blow["truth"] = {{"k", 2.5}};
  blow["learn_k"] = true;
  blow["train_times"] = {0.0, 1.0};
  blow["eval_times"] = {0.0, 1.0};
  const fs::path blow_dir = temp_dir("cli_blow");
  const std::string blow_cfg = "--config " + write_config(blow_dir, blow).string();
  CHECK(run_cli("generate " + blow_cfg) == 0);
  CHECK(run_cli("train " + blow_cfg) == 3);
}
