#include "imdiff/experiments.hpp"

#include <cmath>
#include <set>
#include <sstream>

namespace imdiff::exp {
namespace {

// Strict reader: every key read is marked, leftovers are reported.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + name(key) + "' has the wrong type (" + j_.at(key).dump() + ")");
    }
  }

  void get_u64(const char* key, std::uint64_t& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
      throw ConfigError("config key '" + name(key) + "' must be a non-negative integer");
    }
    out = v.get<std::uint64_t>();
  }

  template <class Fn>
  void child(const char* key, Fn&& fn) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    Reader r(j_.at(key), name(key));
    fn(r);
    r.finish();
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + name(it.key()) + "'");
    }
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config: " : "config key '" + path_ + "': "; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("invalid config: " + msg);
}

bool on_grid(double t, double dt) { return std::abs(std::round(t / dt) * dt - t) <= 1e-9; }

void check_times(const std::vector<double>& times, const char* key, double dt) {
  require(!times.empty(), std::string(key) + " must not be empty");
  require(times.front() == 0.0, std::string(key) + " must start at 0");
  for (std::size_t i = 1; i < times.size(); ++i)
    require(times[i] > times[i - 1], std::string(key) + " must be strictly increasing");
  for (double t : times) {
    if (!on_grid(t, dt)) {
      std::ostringstream os;
      os << key << " entry " << t << " is not a multiple of dt " << dt;
      require(false, os.str());
    }
  }
}

}  // namespace

std::string to_string(Case c) {
  switch (c) {
    case Case::AdvDiffSteady: return "advdiff-steady";
    case Case::AdvDiffDynamic: return "advdiff-dynamic";
    case Case::Burgers: return "burgers";
    case Case::Cvi: return "cvi";
  }
  return "unknown";
}

Case case_from_string(const std::string& s) {
  for (Case c : {Case::AdvDiffSteady, Case::AdvDiffDynamic, Case::Burgers, Case::Cvi})
    if (to_string(c) == s) return c;
  throw ConfigError("unknown case '" + s + "' (expected advdiff-steady, advdiff-dynamic, burgers or cvi)");
}

ExperimentConfig default_config(Case kind) {
  ExperimentConfig c;
  c.kind = kind;
  c.out_dir = "runs/" + to_string(kind);
  switch (kind) {
    case Case::AdvDiffSteady:
      c.train_times = {0.0, 0.05};
      c.eval_times = {0.0, 0.05, 0.1, 0.15, 0.2};
      break;
    case Case::AdvDiffDynamic:
      c.dt = 1e-3;
      c.epochs = 200;
      c.train_times = {0.0, 0.05, 0.102, 0.15, 0.201, 0.25, 0.298, 0.35};
      c.eval_times = {0.0, 0.02, 0.07, 0.12, 0.17, 0.22, 0.27, 0.32, 0.37, 0.4};
      break;
    case Case::Burgers:
      c.train_times = {0.0, 0.1, 0.2, 0.3};
      c.eval_times = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
      break;
    case Case::Cvi:
      c.epochs = 300;
      c.lr = 1e-2;
      c.reg_weight = 0.0;
      c.n_train = 4;
      c.n_test = 1;
      c.ood_length_scales = {};
      break;
  }
  return c;
}

void validate(const ExperimentConfig& c) {
  require(c.nx >= 4 && c.ny >= 4, "nx and ny must be at least 4");
  require(c.lx > 0 && c.ly > 0, "lx and ly must be positive");
  require(c.ref_refine >= 1, "ref_refine must be >= 1");
  require(c.dt > 0 && c.dt_ref > 0, "dt and dt_ref must be positive");
  require(c.checkpoint_every >= 0, "checkpoint_every must be >= 0");
  require(c.k_fixed >= 1, "k_fixed must be >= 1");
  require(c.epochs >= 0, "epochs must be >= 0");
  require(c.lr > 0, "lr must be positive");
  require(c.reg_weight >= 0, "reg_weight must be >= 0");
  require(c.save_every >= 1, "save_every must be >= 1");
  require(c.n_train >= 1 && c.n_test >= 0, "n_train must be >= 1 and n_test >= 0");
  require(!c.out_dir.empty(), "out_dir must not be empty");
  for (double l : c.ood_length_scales) require(l > 0, "ood_length_scales entries must be positive");

  require(c.ic.coarse_nx >= 2 && c.ic.coarse_ny >= 2, "ic.coarse_nx and ic.coarse_ny must be >= 2");
  require(c.ic.coarse_nx <= c.nx && c.ic.coarse_ny <= c.ny, "IC coarse grid must not exceed nx x ny");
  require(c.ic.length_scale_min > 0 && c.ic.length_scale_max >= c.ic.length_scale_min,
          "ic length scales must satisfy 0 < length_scale_min <= length_scale_max");
  require(c.ic.variance > 0, "ic.variance must be positive");
  require(c.truth.n_waves >= 1, "truth.n_waves must be >= 1");
  require(c.truth.k >= 0 && c.truth.nu0 > 0, "truth.k must be >= 0 and truth.nu0 > 0");
  require(c.cnf.latent_dim >= 1 && c.cnf.omega0 > 0, "cnf.latent_dim must be >= 1 and cnf.omega0 > 0");
  for (Index w : c.cnf.hyper_hidden) require(w >= 1, "cnf.hyper_hidden widths must be >= 1");
  for (Index w : c.cnf.siren_hidden) require(w >= 1, "cnf.siren_hidden widths must be >= 1");
  require(!c.cnf.siren_hidden.empty(), "cnf.siren_hidden must have at least one layer");
  require(c.solver.newton_tol > 0 && c.solver.linear_rtol > 0 && c.solver.adjoint_tol > 0 && c.solver.max_newton >= 1,
          "solver tolerances must be positive and max_newton >= 1");

  if (c.kind == Case::Cvi) {
    require(c.cvi.n >= 3 && c.cvi.steps >= 1 && c.cvi.dt > 0 && c.cvi.hidden >= 1, "cvi settings out of range");
    require(!c.cvi.snapshot_steps.empty(), "cvi.snapshot_steps must not be empty");
    for (std::size_t i = 0; i < c.cvi.snapshot_steps.size(); ++i) {
      const int s = c.cvi.snapshot_steps[i];
      require(s >= 1 && s <= c.cvi.steps, "cvi.snapshot_steps entries must lie in [1, cvi.steps]");
      require(i == 0 || s > c.cvi.snapshot_steps[i - 1], "cvi.snapshot_steps must be strictly increasing");
    }
    require(c.cvi.eps0_min > 0 && c.cvi.eps0_max <= 1 && c.cvi.eps0_min <= c.cvi.eps0_max,
            "cvi eps0 range must lie in (0, 1]");
  } else {
    check_times(c.train_times, "train_times", c.dt);
    check_times(c.eval_times, "eval_times", c.dt);
    check_times(c.train_times, "train_times", c.dt_ref);
    check_times(c.eval_times, "eval_times", c.dt_ref);
  }

  const BenchSettings& b = c.bench;
  require(!b.dts.empty() && !b.steppers.empty(), "bench.dts and bench.steppers must not be empty");
  for (const std::string& s : b.steppers) {
    try {
      stepper_from_string(s);
    } catch (const std::invalid_argument& e) {
      require(false, std::string("bench.steppers: ") + e.what());
    }
  }
  require(b.t_end > 0 && b.record_every > 0 && b.ref_refine >= 1 && b.ic_length_scale > 0,
          "bench t_end, record_every, ref_refine and ic_length_scale must be positive");
  for (double dt : b.dts) {
    require(dt > 0, "bench.dts entries must be positive");
    require(on_grid(b.t_end, dt) && on_grid(b.record_every, dt),
            "bench.t_end and bench.record_every must be multiples of every bench.dts entry");
  }
  require(on_grid(b.t_end, c.dt_ref) && on_grid(b.t_end, b.record_every),
          "bench.t_end must be a multiple of dt_ref and bench.record_every");
  require(b.cost_t_end > 0 && b.im_dt > 0 && b.ex_dt > 0, "bench cost times must be positive");
  for (double dt : b.cost_dts) require(dt > 0 && on_grid(b.cost_t_end, dt), "bench.cost_dts must divide cost_t_end");
  require(on_grid(b.cost_t_end, b.im_dt) && on_grid(b.cost_t_end, b.ex_dt) && on_grid(b.cost_t_end, c.dt_ref),
          "bench.cost_t_end must be a multiple of im_dt, ex_dt and dt_ref");
  for (int k : b.k_values) require(k >= 1, "bench.k_values entries must be >= 1");
  require(b.cost_checkpoint_every >= 1, "bench.cost_checkpoint_every must be >= 1");
}

ExperimentConfig parse_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  if (!j.contains("case")) throw ConfigError("config: missing required key 'case'");
  if (!j.at("case").is_string()) throw ConfigError("config key 'case' must be a string");
  ExperimentConfig c = default_config(case_from_string(j.at("case").get<std::string>()));

  Reader r(j, "");
  std::string kind, stepper = to_string(c.stepper);
  r.get("case", kind);
  r.get_u64("seed", c.seed);
  r.get("out_dir", c.out_dir);
  r.get("data_dir", c.data_dir);
  r.get("nx", c.nx);
  r.get("ny", c.ny);
  r.get("lx", c.lx);
  r.get("ly", c.ly);
  r.get("ref_refine", c.ref_refine);
  r.get("dt_ref", c.dt_ref);
  r.get("dt", c.dt);
  r.get("stepper", stepper);
  r.get("checkpoint_every", c.checkpoint_every);
  r.get("k_fixed", c.k_fixed);
  r.get("epochs", c.epochs);
  r.get("lr", c.lr);
  r.get("reg_weight", c.reg_weight);
  r.get("save_every", c.save_every);
  r.get("learn_k", c.learn_k);
  r.get("n_train", c.n_train);
  r.get("n_test", c.n_test);
  r.get("ood_length_scales", c.ood_length_scales);
  r.get("train_times", c.train_times);
  r.get("eval_times", c.eval_times);
  r.child("ic", [&](Reader& s) {
    s.get("coarse_nx", c.ic.coarse_nx);
    s.get("coarse_ny", c.ic.coarse_ny);
    s.get("length_scale_min", c.ic.length_scale_min);
    s.get("length_scale_max", c.ic.length_scale_max);
    s.get("variance", c.ic.variance);
    s.get("mean", c.ic.mean);
  });
  r.child("truth", [&](Reader& s) {
    s.get("n_waves", c.truth.n_waves);
    s.get("velocity_scale", c.truth.velocity_scale);
    s.get("k", c.truth.k);
    s.get("nu0", c.truth.nu0);
    s.get("cvi_d0", c.truth.cvi_d0);
    s.get("cvi_k0", c.truth.cvi_k0);
    s.get("cvi_s0", c.truth.cvi_s0);
  });
  r.child("cnf", [&](Reader& s) {
    s.get("hyper_hidden", c.cnf.hyper_hidden);
    s.get("latent_dim", c.cnf.latent_dim);
    s.get("siren_hidden", c.cnf.siren_hidden);
    s.get("omega0", c.cnf.omega0);
    s.get("projector_init_scale", c.cnf.projector_init_scale);
  });
  r.child("solver", [&](Reader& s) {
    s.get("newton_tol", c.solver.newton_tol);
    s.get("newton_abs_tol", c.solver.newton_abs_tol);
    s.get("linear_rtol", c.solver.linear_rtol);
    s.get("max_newton", c.solver.max_newton);
    s.get("adjoint_tol", c.solver.adjoint_tol);
  });
  r.child("bench", [&](Reader& s) {
    s.get("dts", c.bench.dts);
    s.get("steppers", c.bench.steppers);
    s.get("t_end", c.bench.t_end);
    s.get("record_every", c.bench.record_every);
    s.get("ref_refine", c.bench.ref_refine);
    s.get("ic_length_scale", c.bench.ic_length_scale);
    s.get("cost_t_end", c.bench.cost_t_end);
    s.get("im_dt", c.bench.im_dt);
    s.get("ex_dt", c.bench.ex_dt);
    s.get("k_values", c.bench.k_values);
    s.get("cost_checkpoint_every", c.bench.cost_checkpoint_every);
    s.get("cost_dts", c.bench.cost_dts);
  });
  r.child("cvi", [&](Reader& s) {
    s.get("n", c.cvi.n);
    s.get("steps", c.cvi.steps);
    s.get("dt", c.cvi.dt);
    s.get("hidden", c.cvi.hidden);
    s.get("snapshot_steps", c.cvi.snapshot_steps);
    s.get("eps0_min", c.cvi.eps0_min);
    s.get("eps0_max", c.cvi.eps0_max);
    s.get("q", c.cvi.q);
  });
  r.finish();
  try {
    c.stepper = stepper_from_string(stepper);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config key 'stepper': ") + e.what());
  }
  validate(c);
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["case"] = to_string(c.kind);
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["data_dir"] = c.data_dir;
  j["nx"] = c.nx;
  j["ny"] = c.ny;
  j["lx"] = c.lx;
  j["ly"] = c.ly;
  j["ref_refine"] = c.ref_refine;
  j["dt_ref"] = c.dt_ref;
  j["dt"] = c.dt;
  j["stepper"] = to_string(c.stepper);
  j["checkpoint_every"] = c.checkpoint_every;
  j["k_fixed"] = c.k_fixed;
  j["epochs"] = c.epochs;
  j["lr"] = c.lr;
  j["reg_weight"] = c.reg_weight;
  j["save_every"] = c.save_every;
  j["learn_k"] = c.learn_k;
  j["n_train"] = c.n_train;
  j["n_test"] = c.n_test;
  j["ood_length_scales"] = c.ood_length_scales;
  j["train_times"] = c.train_times;
  j["eval_times"] = c.eval_times;
  j["ic"] = {{"coarse_nx", c.ic.coarse_nx},
             {"coarse_ny", c.ic.coarse_ny},
             {"length_scale_min", c.ic.length_scale_min},
             {"length_scale_max", c.ic.length_scale_max},
             {"variance", c.ic.variance},
             {"mean", c.ic.mean}};
  j["truth"] = {{"n_waves", c.truth.n_waves}, {"velocity_scale", c.truth.velocity_scale},
                {"k", c.truth.k},             {"nu0", c.truth.nu0},
                {"cvi_d0", c.truth.cvi_d0},   {"cvi_k0", c.truth.cvi_k0},
                {"cvi_s0", c.truth.cvi_s0}};
  j["cnf"] = {{"hyper_hidden", c.cnf.hyper_hidden},
              {"latent_dim", c.cnf.latent_dim},
              {"siren_hidden", c.cnf.siren_hidden},
              {"omega0", c.cnf.omega0},
              {"projector_init_scale", c.cnf.projector_init_scale}};
  j["solver"] = {{"newton_tol", c.solver.newton_tol},
                 {"newton_abs_tol", c.solver.newton_abs_tol},
                 {"linear_rtol", c.solver.linear_rtol},
                 {"max_newton", c.solver.max_newton},
                 {"adjoint_tol", c.solver.adjoint_tol}};
  j["bench"] = {{"dts", c.bench.dts},
                {"steppers", c.bench.steppers},
                {"t_end", c.bench.t_end},
                {"record_every", c.bench.record_every},
                {"ref_refine", c.bench.ref_refine},
                {"ic_length_scale", c.bench.ic_length_scale},
                {"cost_t_end", c.bench.cost_t_end},
                {"im_dt", c.bench.im_dt},
                {"ex_dt", c.bench.ex_dt},
                {"k_values", c.bench.k_values},
                {"cost_checkpoint_every", c.bench.cost_checkpoint_every},
                {"cost_dts", c.bench.cost_dts}};
  j["cvi"] = {{"n", c.cvi.n},
              {"steps", c.cvi.steps},
              {"dt", c.cvi.dt},
              {"hidden", c.cvi.hidden},
              {"snapshot_steps", c.cvi.snapshot_steps},
              {"eps0_min", c.cvi.eps0_min},
              {"eps0_max", c.cvi.eps0_max},
              {"q", c.cvi.q}};
  return j;
}

ExperimentConfig load_config(const fs::path& path, const Overrides& overrides) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const io::IoError& e) {
    throw ConfigError(e.what());
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path.string() + ": top level must be a JSON object");
  if (overrides.seed) j["seed"] = *overrides.seed;
  if (overrides.out_dir) j["out_dir"] = *overrides.out_dir;
  return parse_config(j);
}

}  // namespace imdiff::exp
