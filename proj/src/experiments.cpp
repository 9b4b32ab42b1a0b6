#include "imdiff/experiments.hpp"

#include "imdiff/autodiff.hpp"
#include "imdiff/ops.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace imdiff::exp {
namespace {

using clock = std::chrono::steady_clock;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string indexed(const std::string& stem, std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03zu", i);
  return stem + "_" + buf;
}

bool is_advdiff(Case k) { return k == Case::AdvDiffSteady || k == Case::AdvDiffDynamic; }

std::vector<double> union_times(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out = a;
  for (double t : b) {
    bool dup = false;
    for (double s : out) dup = dup || std::abs(s - t) <= 1e-9;
    if (!dup) out.push_back(t);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t time_index(const std::vector<double>& times, double t) {
  for (std::size_t i = 0; i < times.size(); ++i)
    if (std::abs(times[i] - t) <= 1e-9) return i;
  std::ostringstream os;
  os << "dataset has no snapshot at t = " << t;
  throw ConfigError(os.str());
}

json waves_json(const CosineFieldSpec& s) {
  json a = json::array();
  for (const Wave& w : s.waves)
    a.push_back({{"amplitude", w.amplitude}, {"kx", w.kx}, {"ky", w.ky}, {"omega", w.omega}, {"phase", w.phase}});
  return {{"seed", s.seed}, {"waves", a}};
}

CnfConfig cnf_config(const ExperimentConfig& c) {
  CnfConfig k;
  k.hyper_hidden = c.cnf.hyper_hidden;
  k.latent_dim = c.cnf.latent_dim;
  k.siren_hidden = c.cnf.siren_hidden;
  k.omega0 = c.cnf.omega0;
  k.projector_init_scale = c.cnf.projector_init_scale;
  return k;
}

ImplicitOptions implicit_options(const ExperimentConfig& c) {
  ImplicitOptions o;
  o.newton.tol = c.solver.newton_tol;
  o.newton.abs_tol = c.solver.newton_abs_tol;
  o.newton.linear_rtol = c.solver.linear_rtol;
  o.newton.max_newton = c.solver.max_newton;
  o.adjoint_tol = c.solver.adjoint_tol;
  return o;
}

RolloutConfig rollout_config(const ExperimentConfig& c, double t_end) {
  RolloutConfig r;
  r.stepper = c.stepper;
  r.dt = c.dt;
  r.t_end = t_end;
  r.checkpoint_every = c.checkpoint_every;
  r.k_fixed = c.k_fixed;
  r.implicit = implicit_options(c);
  return r;
}

/// Keys that determine the generated data; a dataset is reusable when these match.
json generation_keys(const ExperimentConfig& c) {
  const json all = to_json(c);
  json g;
  for (const char* k : {"case", "seed", "nx", "ny", "lx", "ly", "ref_refine", "dt_ref", "n_train", "n_test",
                        "ood_length_scales", "train_times", "eval_times", "ic", "truth"})
    g[k] = all[k];
  if (c.kind == Case::Cvi) g["cvi"] = all["cvi"];
  return g;
}

/// Keys that determine the model and its parameter layout.
json model_keys(const ExperimentConfig& c) {
  json g = generation_keys(c);
  const json all = to_json(c);
  for (const char* k : {"learn_k", "cnf"}) g[k] = all[k];
  if (c.kind == Case::Cvi) g["cvi"] = all["cvi"];
  return g;
}

void diff_json(const json& want, const json& have, const std::string& path, std::vector<std::string>& out) {
  if (want.is_object() && have.is_object()) {
    for (auto it = want.begin(); it != want.end(); ++it) {
      const std::string p = path.empty() ? it.key() : path + "." + it.key();
      if (!have.contains(it.key())) {
        out.push_back(p + ": config " + it.value().dump() + ", stored <missing>");
      } else {
        diff_json(it.value(), have.at(it.key()), p, out);
      }
    }
    return;
  }
  if (want != have) out.push_back(path + ": config " + want.dump() + ", stored " + have.dump());
}

void require_match(const json& want, const json& have, const std::string& what) {
  std::vector<std::string> diffs;
  diff_json(want, have, "", diffs);
  if (diffs.empty()) return;
  std::string msg = what + " does not match the config:";
  for (const std::string& d : diffs) msg += "\n  " + d;
  throw ConfigError(msg);
}

json read_json(const fs::path& p) {
  try {
    return json::parse(io::read_file(p));
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) { io::write_atomic(p, j.dump(2) + "\n"); }

void refuse_existing(const std::vector<fs::path>& paths, bool force) {
  if (force) return;
  for (const fs::path& p : paths)
    if (fs::exists(p)) throw ConfigError("output " + p.string() + " already exists; pass --force to overwrite");
}

// ---------------------------------------------------------------------------
// CVI helpers

struct CviSetup {
  CviGrid grid;
  CviTruth truth;
};

CviSetup cvi_setup(const ExperimentConfig& c) {
  CviSetup s;
  s.grid.n = c.cvi.n;
  s.grid.constants.q = c.cvi.q;
  s.truth.d0 = c.truth.cvi_d0;
  s.truth.k0 = c.truth.cvi_k0;
  s.truth.s0 = c.truth.cvi_s0;
  return s;
}

struct CviModel {
  std::shared_ptr<ParamSet> params = std::make_shared<ParamSet>();
  CviNeuralOps ops;
};

CviModel make_cvi_model(const ExperimentConfig& c) {
  CviModel m;
  m.ops = CviNeuralOps(*m.params, "cvi", c.cvi.hidden);
  std::mt19937_64 rng(derive_seed(c.seed, "init"));
  m.ops.initialize(*m.params, rng);
  return m;
}

std::vector<double> cvi_times(const ExperimentConfig& c) {
  std::vector<double> t{0.0};
  for (int s : c.cvi.snapshot_steps) t.push_back(s * c.cvi.dt);
  return t;
}

CviRolloutConfig cvi_rollout_config(const ExperimentConfig& c, int steps) {
  CviRolloutConfig r;
  r.dt = c.cvi.dt;
  r.steps = steps;
  r.implicit.adjoint_tol = c.solver.adjoint_tol;
  return r;
}

/// Porosity states at snapshot steps (index 0 = initial state).
std::vector<Tensor> cvi_snapshots(const ExperimentConfig& c, const CviRolloutResult& r, const Tensor& eps0) {
  std::vector<Tensor> out{eps0};
  for (int s : c.cvi.snapshot_steps) out.push_back(r.states[static_cast<std::size_t>(s - 1)]);
  return out;
}

// Truth coefficients tabulated on eps in [0.05, 1] against the learned ones.
double cvi_field_error(const ExperimentConfig& c, const CviModel& m, const Vector& params) {
  const CviSetup s = cvi_setup(c);
  Vector eps = Vector::LinSpaced(64, 0.05, 1.0);
  CviCoefficients t = s.truth.evaluate(Tensor(eps));
  CviCoefficients l = m.ops.evaluate(*m.params, Tensor(params), Tensor(eps));
  double num = 0.0, den = 0.0;
  for (auto [a, b] : {std::pair{&l.d_eff, &t.d_eff}, std::pair{&l.k, &t.k}, std::pair{&l.s_v, &t.s_v}}) {
    num += (a->value() - b->value()).cwiseAbs().sum();
    den += b->value().cwiseAbs().sum();
  }
  return den > 0.0 ? num / den : num;
}

// ---------------------------------------------------------------------------
// Checkpoints

json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector json_vec(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

void write_checkpoint(const fs::path& p, const ExperimentConfig& c, const ParamSet& ps, const Vector& params,
                      const AdamState& adam, int epoch) {
  json segs = json::array();
  for (const auto& s : ps.segments())
    segs.push_back({{"name", s.name}, {"offset", s.offset}, {"size", s.size}, {"regularized", s.regularized}});
  json j;
  j["format"] = "imdiff-checkpoint";
  j["version"] = 1;
  j["epoch"] = epoch;
  j["model"] = model_keys(c);
  j["segments"] = segs;
  j["params"] = vec_json(params);
  j["adam"] = {{"lr", adam.lr},     {"beta1", adam.beta1}, {"beta2", adam.beta2},
               {"eps", adam.eps},   {"t", adam.t},         {"skipped", adam.skipped},
               {"m", vec_json(adam.m)}, {"v", vec_json(adam.v)}};
  write_json(p, j);
}

struct Checkpoint {
  int epoch = 0;
  Vector params;
  AdamState adam;
};

Checkpoint read_checkpoint(const fs::path& p, const ExperimentConfig& c, const ParamSet& ps) {
  if (!fs::exists(p)) throw ConfigError("checkpoint " + p.string() + " not found");
  const json j = read_json(p);
  if (j.value("format", "") != "imdiff-checkpoint") throw ConfigError(p.string() + ": not an imdiff checkpoint");
  require_match(model_keys(c), j.at("model"), "checkpoint " + p.string());
  Checkpoint ck;
  ck.epoch = j.at("epoch").get<int>();
  ck.params = json_vec(j.at("params"));
  if (ck.params.size() != ps.size()) throw ConfigError(p.string() + ": parameter count does not match the model");
  const json& a = j.at("adam");
  ck.adam.beta1 = a.at("beta1").get<double>();
  ck.adam.beta2 = a.at("beta2").get<double>();
  ck.adam.eps = a.at("eps").get<double>();
  ck.adam.t = a.at("t").get<long>();
  ck.adam.skipped = a.at("skipped").get<long>();
  ck.adam.m = json_vec(a.at("m"));
  ck.adam.v = json_vec(a.at("v"));
  return ck;
}

io::CsvRow metric_row(const EpochMetrics& e) {
  return {std::to_string(e.epoch),       io::format_double(e.loss),      io::format_double(e.state_l1),
          io::format_double(e.field_l1), std::to_string(e.peak_nodes),   std::to_string(e.peak_scalars),
          io::format_double(e.seconds)};
}

// ---------------------------------------------------------------------------
// Field errors

std::function<double(const Vector&)> field_error_fn(const ExperimentConfig& c, const HybridModel& m) {
  std::vector<double> times = c.kind == Case::AdvDiffDynamic ? c.eval_times : std::vector<double>{0.0};
  std::vector<Vector> truth;
  for (double t : times) {
    for (Vector& f : truth_fields(c, t)) truth.push_back(std::move(f));
  }
  return [m, times, truth](const Vector& params) {
    double num = 0.0, den = 0.0;
    std::size_t k = 0;
    for (double t : times) {
      for (const Tensor& f : m.fields(Tensor(params), t)) {
        num += (f.value() - truth[k]).cwiseAbs().sum();
        den += truth[k].cwiseAbs().sum();
        ++k;
      }
    }
    return den > 0.0 ? num / den : num;
  };
}

double pooled_error(const std::vector<Vector>& pred, const std::vector<Vector>& truth) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    num += (pred[i] - truth[i]).cwiseAbs().sum();
    den += truth[i].cwiseAbs().sum();
  }
  return den > 0.0 ? num / den : num;
}

double training_state_error(const ExperimentConfig& c, const HybridModel& m, const Vector& params,
                            const std::vector<SnapshotDataset>& data) {
  std::vector<Vector> pred, truth;
  const RolloutConfig rc = rollout_config(c, c.train_times.back());
  for (const SnapshotDataset& d : data) {
    Trajectory tr = rollout(m, Tensor(d.fields[0]), Tensor(params), rc, d.times);
    for (std::size_t k = 1; k < d.times.size(); ++k) {
      pred.push_back(tr.at_time(d.times[k]).value());
      truth.push_back(d.fields[k]);
    }
  }
  return pooled_error(pred, truth);
}

double cvi_training_error(const ExperimentConfig& c, const CviModel& m, const Vector& params,
                          const std::vector<Sample>& samples) {
  const CviSetup s = cvi_setup(c);
  std::vector<Vector> pred, truth;
  CviCoefficientFn co = [&](const Tensor& f, const Tensor& e) { return m.ops.evaluate(*m.params, f, e); };
  for (const Sample& smp : samples) {
    if (smp.split != "train") continue;
    const Tensor eps0(smp.fields[0]);
    auto r = cvi_rollout(s.grid, co, eps0, Tensor(params), cvi_rollout_config(c, c.cvi.snapshot_steps.back()));
    auto snaps = cvi_snapshots(c, r, eps0);
    for (std::size_t k = 1; k < snaps.size(); ++k) {
      pred.push_back(snaps[k].value());
      truth.push_back(smp.fields[k]);
    }
  }
  return pooled_error(pred, truth);
}

TrainSummary train_cvi(const ExperimentConfig& c, const Dataset& data, bool force);
EvalSummary eval_cvi(const ExperimentConfig& c, const Dataset& data, const fs::path& ckpt);

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, const std::string& purpose) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : purpose) h = (h ^ ch) * 1099511628211ULL;
  return splitmix64(seed ^ splitmix64(h));
}

double gradient_sign_agreement(const Grid2D& g, const Vector& a, const Vector& b) {
  const Index nx = g.nx(), ny = g.ny();
  auto at = [&](const Vector& v, Index i, Index j) { return v[(i + nx) % nx + nx * ((j + ny) % ny)]; };
  Index agree = 0;
  for (Index j = 0; j < ny; ++j) {
    for (Index i = 0; i < nx; ++i) {
      const double ax = (at(a, i + 1, j) - at(a, i - 1, j)) / g.dx(), ay = (at(a, i, j + 1) - at(a, i, j - 1)) / g.dy();
      const double bx = (at(b, i + 1, j) - at(b, i - 1, j)) / g.dx(), by = (at(b, i, j + 1) - at(b, i, j - 1)) / g.dy();
      if (ax * bx + ay * by > 0.0) ++agree;
    }
  }
  return static_cast<double>(agree) / static_cast<double>(nx * ny);
}

// ---------------------------------------------------------------------------
// Setup

CaseSetup make_setup(const ExperimentConfig& c, Index refine) {
  CaseSetup s;
  s.grid = Grid2D(c.nx * refine, c.ny * refine, c.lx, c.ly);
  const bool steady = c.kind != Case::AdvDiffDynamic;
  s.advdiff.truth_ux = CosineFieldSpec::sample(c.truth.n_waves, derive_seed(c.seed, "truth_ux"), steady);
  s.advdiff.truth_uy = CosineFieldSpec::sample(c.truth.n_waves, derive_seed(c.seed, "truth_uy"), steady);
  s.advdiff.velocity_scale = c.truth.velocity_scale;
  s.advdiff.dynamic = !steady;
  s.advdiff.k = c.truth.k;
  s.advdiff.cnf = cnf_config(c);
  s.burgers.truth_nu = CosineFieldSpec::sample(c.truth.n_waves, derive_seed(c.seed, "truth_nu"), true);
  s.burgers.nu0 = c.truth.nu0;
  s.burgers.cnf = cnf_config(c);
  return s;
}

HybridModel make_truth_model(const ExperimentConfig& c, Index refine) {
  CaseSetup s = make_setup(c, refine);
  if (is_advdiff(c.kind)) {
    s.advdiff.velocity = VelocitySource::Truth;
    return make_advdiff_model(s.grid, s.advdiff, 0);
  }
  if (c.kind == Case::Burgers) {
    s.burgers.neural_viscosity = false;
    return make_burgers_model(s.grid, s.burgers, 0);
  }
  throw ConfigError("case " + to_string(c.kind) + " has no grid model");
}

HybridModel make_learned_model(const ExperimentConfig& c) {
  CaseSetup s = make_setup(c);
  const std::uint64_t seed = derive_seed(c.seed, "init");
  if (is_advdiff(c.kind)) {
    s.advdiff.velocity = VelocitySource::Neural;
    s.advdiff.learn_k = c.learn_k;
    if (c.learn_k) s.advdiff.k = 2.0 * c.truth.k;
    return make_advdiff_model(s.grid, s.advdiff, seed);
  }
  if (c.kind == Case::Burgers) {
    s.burgers.neural_viscosity = true;
    return make_burgers_model(s.grid, s.burgers, seed);
  }
  throw ConfigError("case " + to_string(c.kind) + " has no grid model");
}

std::vector<Vector> truth_fields(const ExperimentConfig& c, double t) {
  const CaseSetup s = make_setup(c);
  if (is_advdiff(c.kind)) {
    auto [ux, uy] = truth_velocity(s.grid, s.advdiff, t);
    return {ux, uy};
  }
  if (c.kind == Case::Burgers) return {truth_viscosity(s.grid, s.burgers)};
  return {};
}

// ---------------------------------------------------------------------------
// Data

SnapshotDataset Sample::subset(const std::vector<double>& want, Index nx, Index ny) const {
  SnapshotDataset d;
  d.nx = nx;
  d.ny = ny;
  for (double t : want) {
    d.times.push_back(t);
    d.fields.push_back(fields[time_index(times, t)]);
  }
  return d;
}

std::vector<SnapshotDataset> Dataset::training_set() const {
  std::vector<SnapshotDataset> out;
  for (const Sample& s : samples)
    if (s.split == "train") out.push_back(s.subset(train_times, nx, ny));
  return out;
}

Dataset generate_dataset(const ExperimentConfig& c) {
  Dataset d;
  std::mt19937_64 rng(derive_seed(c.seed, "samples"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  if (c.kind == Case::Cvi) {
    const CviSetup s = cvi_setup(c);
    d.nx = c.cvi.n;
    d.ny = 1;
    d.train_times = d.eval_times = cvi_times(c);
    CviCoefficientFn co = [&](const Tensor&, const Tensor& e) { return s.truth.evaluate(e); };
    for (int i = 0; i < c.n_train + c.n_test; ++i) {
      Sample smp;
      smp.split = i < c.n_train ? "train" : "test";
      smp.id = indexed(smp.split, static_cast<std::size_t>(i < c.n_train ? i : i - c.n_train));
      const double e0 = c.cvi.eps0_min + (c.cvi.eps0_max - c.cvi.eps0_min) * unit(rng);
      smp.length_scale = e0;
      const Tensor eps0(Vector::Constant(c.cvi.n, e0));
      auto r = cvi_rollout(s.grid, co, eps0, Tensor(Vector::Zero(1)), cvi_rollout_config(c, c.cvi.snapshot_steps.back()));
      smp.times = d.train_times;
      for (const Tensor& e : cvi_snapshots(c, r, eps0)) smp.fields.push_back(e.value());
      d.samples.push_back(std::move(smp));
    }
    return d;
  }

  const Index f = c.ref_refine;
  d.nx = c.nx;
  d.ny = c.ny;
  d.train_times = c.train_times;
  d.eval_times = c.eval_times;
  const std::vector<double> times = union_times(c.train_times, c.eval_times);
  const CaseSetup fine = make_setup(c, f);
  HybridModel truth = make_truth_model(c, f);
  const Tensor flat(truth.params->values());
  std::shared_ptr<const Tensor> steady;
  if (!truth.time_dependent) steady = std::make_shared<const Tensor>(truth.coefficients(flat, 0.0));
  TimeRhsFn rhs = [&](double t, const Vector& u) {
    return truth.rhs(Tensor(u), steady ? *steady : truth.coefficients(flat, t)).value();
  };

  auto make = [&](const std::string& split, std::size_t idx, double ls) {
    Sample smp;
    smp.split = split;
    smp.id = indexed(split, idx);
    smp.length_scale = ls;
    smp.ic_seed = derive_seed(c.seed, smp.id);
    GpIcSpec g;
    g.coarse_nx = c.ic.coarse_nx;
    g.coarse_ny = c.ic.coarse_ny;
    g.length_scale = ls;
    g.variance = c.ic.variance;
    g.mean = c.ic.mean;
    g.seed = smp.ic_seed;
    const Vector ic = sample_gp_ic(g, fine.grid);
    SnapshotDataset ref = rk4_reference_rollout(rhs, ic, c.dt_ref, times, fine.grid.nx(), fine.grid.ny());
    smp.times = ref.times;
    for (const Vector& v : ref.fields) smp.fields.push_back(f == 1 ? v : restrict_average(v, f, c.nx, c.ny));
    return smp;
  };
  const double ls_min = c.ic.length_scale_min, ls_span = c.ic.length_scale_max - c.ic.length_scale_min;
  for (int i = 0; i < c.n_train; ++i) {
    const double u = c.n_train == 1 ? 0.5 : static_cast<double>(i) / (c.n_train - 1);
    d.samples.push_back(make("train", static_cast<std::size_t>(i), ls_min + ls_span * u));
  }
  for (int i = 0; i < c.n_test; ++i) d.samples.push_back(make("test", static_cast<std::size_t>(i), ls_min + ls_span * unit(rng)));
  for (std::size_t i = 0; i < c.ood_length_scales.size(); ++i) d.samples.push_back(make("ood", i, c.ood_length_scales[i]));
  return d;
}

void write_dataset(const ExperimentConfig& c, const Dataset& d, const fs::path& dir) {
  json samples = json::array();
  for (const Sample& s : d.samples) {
    json files = json::array();
    for (std::size_t k = 0; k < s.times.size(); ++k) {
      const std::string rel = s.id + "/" + indexed("t", k) + ".imdf";
      io::write_imdf(dir / rel, {static_cast<std::uint32_t>(d.nx), static_cast<std::uint32_t>(d.ny), s.times[k],
                                 s.fields[k]});
      files.push_back({{"time", s.times[k]}, {"path", rel}});
    }
    samples.push_back({{"id", s.id},
                       {"split", s.split},
                       {"length_scale", s.length_scale},
                       {"ic_seed", s.ic_seed},
                       {"files", files}});
  }
  json truth;
  if (c.kind != Case::Cvi) {
    const CaseSetup setup = make_setup(c);
    const std::vector<std::string> names =
        is_advdiff(c.kind) ? std::vector<std::string>{"ux", "uy"} : std::vector<std::string>{"nu"};
    const std::vector<double> times = c.kind == Case::AdvDiffDynamic ? d.eval_times : std::vector<double>{0.0};
    json files = json::array();
    for (std::size_t k = 0; k < times.size(); ++k) {
      auto fields = truth_fields(c, times[k]);
      for (std::size_t n = 0; n < names.size(); ++n) {
        const std::string rel = "truth/" + names[n] + "_" + indexed("t", k) + ".imdf";
        io::write_imdf(dir / rel, {static_cast<std::uint32_t>(d.nx), static_cast<std::uint32_t>(d.ny), times[k],
                                   fields[n]});
        files.push_back({{"field", names[n]}, {"time", times[k]}, {"path", rel}});
      }
    }
    truth["files"] = files;
    if (is_advdiff(c.kind)) {
      truth["ux"] = waves_json(setup.advdiff.truth_ux);
      truth["uy"] = waves_json(setup.advdiff.truth_uy);
      truth["velocity_scale"] = c.truth.velocity_scale;
      truth["k"] = c.truth.k;
    } else {
      truth["nu"] = waves_json(setup.burgers.truth_nu);
      truth["nu0"] = c.truth.nu0;
      truth["nu_formula"] = "nu0 * (1 + 0.5 * f / sum|A|)";
    }
  } else {
    truth = {{"d_eff", "d0 * eps^1.5"}, {"k", "k0"}, {"s_v", "s0 * eps * (1 - eps)"},
             {"d0", c.truth.cvi_d0},   {"k0", c.truth.cvi_k0}, {"s0", c.truth.cvi_s0}};
  }
  json m;
  m["format"] = "imdiff-dataset";
  m["version"] = 1;
  m["generation"] = generation_keys(c);
  m["nx"] = d.nx;
  m["ny"] = d.ny;
  m["train_times"] = d.train_times;
  m["eval_times"] = d.eval_times;
  m["truth"] = truth;
  m["samples"] = samples;
  write_json(dir / "manifest.json", m);
}

Dataset read_dataset(const ExperimentConfig& c, const fs::path& dir) {
  const fs::path mp = dir / "manifest.json";
  if (!fs::exists(mp)) throw ConfigError("dataset manifest " + mp.string() + " not found; run generate first");
  const json m = read_json(mp);
  if (m.value("format", "") != "imdiff-dataset") throw ConfigError(mp.string() + ": not an imdiff dataset");
  require_match(generation_keys(c), m.at("generation"), "dataset " + mp.string());
  Dataset d;
  d.nx = m.at("nx").get<Index>();
  d.ny = m.at("ny").get<Index>();
  d.train_times = m.at("train_times").get<std::vector<double>>();
  d.eval_times = m.at("eval_times").get<std::vector<double>>();
  for (const json& s : m.at("samples")) {
    Sample smp;
    smp.id = s.at("id").get<std::string>();
    smp.split = s.at("split").get<std::string>();
    smp.length_scale = s.at("length_scale").get<double>();
    smp.ic_seed = s.at("ic_seed").get<std::uint64_t>();
    for (const json& f : s.at("files")) {
      io::FieldSnapshot snap = io::read_imdf(dir / f.at("path").get<std::string>());
      if (snap.nx != d.nx || snap.ny != d.ny) throw ConfigError("dataset file " + f.at("path").get<std::string>() + " has the wrong grid");
      smp.times.push_back(snap.time);
      smp.fields.push_back(std::move(snap.values));
    }
    d.samples.push_back(std::move(smp));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_generate(const ExperimentConfig& c, bool force) {
  validate(c);
  const fs::path dir = c.data_path();
  refuse_existing({dir / "manifest.json"}, force);
  write_dataset(c, generate_dataset(c), dir);
}

TrainSummary cmd_train(const ExperimentConfig& c, bool force) {
  validate(c);
  const Dataset data = read_dataset(c, c.data_path());
  if (c.kind == Case::Cvi) return train_cvi(c, data, force);

  const fs::path out = c.out_path();
  const fs::path ckpt = out / "checkpoint.json";
  HybridModel model = make_learned_model(c);
  TrainConfig tc;
  tc.rollout = rollout_config(c, c.train_times.back());
  tc.loss.reg_weight = c.reg_weight;
  tc.adam.lr = c.lr;
  tc.field_error = field_error_fn(c, model);

  io::CsvTable metrics(out / "metrics.csv", kMetricHeader);
  int epoch = 0;
  if (fs::exists(ckpt) && !force) {
    Checkpoint ck = read_checkpoint(ckpt, c, *model.params);
    model.params->set_values(ck.params);
    ck.adam.lr = c.lr;
    tc.adam = ck.adam;
    epoch = ck.epoch;
    if (fs::exists(out / "metrics.csv")) {
      metrics.load_existing();
      std::vector<io::CsvRow> keep;
      for (const io::CsvRow& r : metrics.rows())
        if (std::stoi(r[0]) < epoch) keep.push_back(r);
      metrics = io::CsvTable(out / "metrics.csv", kMetricHeader);
      for (io::CsvRow& r : keep) metrics.append(std::move(r));
    }
  }
  TrainSummary summary;
  summary.start_epoch = epoch;
  metrics.flush();
  tc.on_epoch = [&](const EpochMetrics& e) {
    metrics.append(metric_row(e));
    metrics.flush();
    summary.final_loss = e.loss;
  };
  const std::vector<SnapshotDataset> train_set = data.training_set();
  while (epoch < c.epochs) {
    tc.start_epoch = epoch;
    tc.epochs = std::min(c.save_every, c.epochs - epoch);
    TrainResult r = train(model, train_set, tc);
    tc.adam = r.adam;
    epoch += tc.epochs;
    write_checkpoint(ckpt, c, *model.params, r.params, r.adam, epoch);
  }
  if (!fs::exists(ckpt)) write_checkpoint(ckpt, c, *model.params, model.params->values(), tc.adam, epoch);

  summary.final_epoch = epoch;
  summary.params = model.params->values();
  summary.train_state_error = training_state_error(c, model, summary.params, train_set);
  summary.field_error = tc.field_error(summary.params);
  write_json(out / "train_summary.json", {{"start_epoch", summary.start_epoch},
                                          {"final_epoch", summary.final_epoch},
                                          {"final_loss", summary.final_loss},
                                          {"train_state_error", summary.train_state_error},
                                          {"field_error", summary.field_error}});
  return summary;
}

EvalSummary cmd_eval(const ExperimentConfig& c, const fs::path& checkpoint) {
  validate(c);
  const fs::path ckpt = checkpoint.empty() ? c.out_path() / "checkpoint.json" : checkpoint;
  if (!fs::exists(ckpt)) throw ConfigError("checkpoint " + ckpt.string() + " not found; run train first");
  const Dataset data = read_dataset(c, c.data_path());
  if (c.kind == Case::Cvi) return eval_cvi(c, data, ckpt);

  HybridModel model = make_learned_model(c);
  const Checkpoint ck = read_checkpoint(ckpt, c, *model.params);
  model.params->set_values(ck.params);
  const Vector& params = ck.params;
  const fs::path out = c.out_path();
  const fs::path img = out / "images";
  const RolloutConfig rc = rollout_config(c, data.eval_times.back());

  EvalSummary s;
  s.train_state_error = training_state_error(c, model, params, data.training_set());
  std::map<std::string, std::pair<std::vector<Vector>, std::vector<Vector>>> pooled;
  for (const Sample& smp : data.samples) {
    const SnapshotDataset ev = smp.subset(data.eval_times, data.nx, data.ny);
    Trajectory tr = rollout(model, Tensor(ev.fields[0]), Tensor(params), rc, ev.times);
    for (std::size_t k = 1; k < ev.times.size(); ++k) {
      const Vector& pred = tr.at_time(ev.times[k]).value();
      const Vector& truth = ev.fields[k];
      s.rows.push_back({smp.id, smp.split, smp.length_scale, ev.times[k], relative_error_l1(pred, truth).value});
      pooled[smp.split].first.push_back(pred);
      pooled[smp.split].second.push_back(truth);
      const std::string stem = smp.id + "_" + indexed("t", k);
      io::write_field_png(img / (stem + "_pred.png"), pred, data.nx, data.ny);
      io::write_field_png(img / (stem + "_truth.png"), truth, data.nx, data.ny);
      io::write_field_png(img / (stem + "_error.png"), (pred - truth).cwiseAbs(), data.nx, data.ny);
    }
  }
  auto pooled_for = [&](const char* split) {
    auto it = pooled.find(split);
    return it == pooled.end() ? 0.0 : pooled_error(it->second.first, it->second.second);
  };
  s.train_horizon_error = pooled_for("train");
  s.test_horizon_error = pooled_for("test");
  s.ood_horizon_error = pooled_for("ood");
  s.field_error = field_error_fn(c, model)(params);

  const CaseSetup setup = make_setup(c);
  const auto learned = model.fields(Tensor(params), 0.0);
  const auto truth = truth_fields(c, 0.0);
  const std::vector<std::string> names =
      is_advdiff(c.kind) ? std::vector<std::string>{"ux", "uy"} : std::vector<std::string>{"nu"};
  for (std::size_t n = 0; n < names.size(); ++n) {
    io::write_field_png(img / ("field_" + names[n] + "_pred.png"), learned[n].value(), data.nx, data.ny);
    io::write_field_png(img / ("field_" + names[n] + "_truth.png"), truth[n], data.nx, data.ny);
    io::write_field_png(img / ("field_" + names[n] + "_error.png"), (learned[n].value() - truth[n]).cwiseAbs(),
                        data.nx, data.ny);
  }
  if (c.kind == Case::Burgers) s.gradient_sign_agreement = gradient_sign_agreement(setup.grid, learned[0].value(), truth[0]);

  io::CsvTable table(out / "eval_errors.csv", {"sample", "split", "length_scale", "time", "state_l1_error"});
  for (const EvalRow& r : s.rows)
    table.append({r.sample, r.split, io::format_double(r.length_scale), io::format_double(r.time),
                  io::format_double(r.state_error)});
  table.flush();
  write_json(out / "eval_summary.json", {{"checkpoint_epoch", ck.epoch},
                                         {"train_state_error", s.train_state_error},
                                         {"train_horizon_error", s.train_horizon_error},
                                         {"test_horizon_error", s.test_horizon_error},
                                         {"ood_horizon_error", s.ood_horizon_error},
                                         {"field_error", s.field_error},
                                         {"gradient_sign_agreement", s.gradient_sign_agreement}});
  return s;
}

StabilitySummary cmd_bench_stability(const ExperimentConfig& c, bool force) {
  validate(c);
  if (c.kind == Case::Cvi) throw ConfigError("bench-stability needs a grid case (advdiff or burgers)");
  const fs::path out = c.out_path();
  refuse_existing({out / "stability_vs_time.csv", out / "stability_vs_dt.csv"}, force);
  const BenchSettings& b = c.bench;
  const Index f = b.ref_refine;

  // Reference on the refined grid, averaged onto the model grid.
  const CaseSetup fine = make_setup(c, f);
  GpIcSpec g;
  g.coarse_nx = c.ic.coarse_nx;
  g.coarse_ny = c.ic.coarse_ny;
  g.length_scale = b.ic_length_scale;
  g.variance = c.ic.variance;
  g.mean = c.ic.mean;
  g.seed = derive_seed(c.seed, "bench_ic");
  const Vector ic_fine = sample_gp_ic(g, fine.grid);
  const Vector ic = f == 1 ? ic_fine : restrict_average(ic_fine, f, c.nx, c.ny);
  std::vector<double> times{0.0};
  const long n_rec = std::lround(b.t_end / b.record_every);
  for (long k = 1; k <= n_rec; ++k) times.push_back(static_cast<double>(k) * b.record_every);

  HybridModel truth_fine = make_truth_model(c, f);
  const Tensor flat_fine(truth_fine.params->values());
  std::shared_ptr<const Tensor> steady;
  if (!truth_fine.time_dependent) steady = std::make_shared<const Tensor>(truth_fine.coefficients(flat_fine, 0.0));
  TimeRhsFn rhs = [&](double t, const Vector& u) {
    return truth_fine.rhs(Tensor(u), steady ? *steady : truth_fine.coefficients(flat_fine, t)).value();
  };
  SnapshotDataset ref = rk4_reference_rollout(rhs, ic_fine, c.dt_ref, times, fine.grid.nx(), fine.grid.ny());
  std::vector<Vector> ref_coarse;
  for (const Vector& v : ref.fields) ref_coarse.push_back(f == 1 ? v : restrict_average(v, f, c.nx, c.ny));

  HybridModel model = make_truth_model(c, 1);
  const Tensor flat(model.params->values());
  StabilitySummary s;
  for (const std::string& name : b.steppers) {
    for (double dt : b.dts) {
      RolloutConfig rc = rollout_config(c, b.record_every);
      rc.stepper = stepper_from_string(name);
      rc.dt = dt;
      rc.checkpoint_every = 0;
      Tensor u(ic);
      bool diverged = false;
      for (std::size_t k = 1; k < times.size(); ++k) {
        double err = kDivergedError;
        if (!diverged) {
          rc.t_start = times[k - 1];
          try {
            u = rollout(model, u, flat, rc, {0.0, b.record_every}).states.back();
            err = relative_error_l1(u.value(), ref_coarse[k]).value;
          } catch (const NumericalError&) {
            diverged = true;
          }
        }
        s.vs_time.push_back({name, dt, times[k], err, diverged});
      }
      s.vs_dt.push_back(s.vs_time.back());
    }
  }

  const io::CsvRow header{"stepper", "dt", "time", "l1_error", "diverged"};
  auto row = [](const StabilityRow& r) {
    return io::CsvRow{r.stepper, io::format_double(r.dt), io::format_double(r.time), io::format_double(r.error),
                      r.diverged ? "1" : "0"};
  };
  io::CsvTable vt(out / "stability_vs_time.csv", header), vd(out / "stability_vs_dt.csv", header);
  for (const StabilityRow& r : s.vs_time) vt.append(row(r));
  for (const StabilityRow& r : s.vs_dt) vd.append(row(r));
  vt.flush();
  vd.flush();
  return s;
}

std::vector<CostRow> cmd_bench_cost(const ExperimentConfig& c, bool force) {
  validate(c);
  if (c.kind == Case::Cvi) throw ConfigError("bench-cost needs a grid case (advdiff or burgers)");
  const fs::path out = c.out_path();
  refuse_existing({out / "bench_cost.csv", out / "bench_cost.png"}, force);
  const BenchSettings& b = c.bench;

  GpIcSpec g;
  g.coarse_nx = c.ic.coarse_nx;
  g.coarse_ny = c.ic.coarse_ny;
  g.length_scale = b.ic_length_scale;
  g.variance = c.ic.variance;
  g.mean = c.ic.mean;
  g.seed = derive_seed(c.seed, "bench_ic");
  const CaseSetup setup = make_setup(c);
  const Vector ic = sample_gp_ic(g, setup.grid);

  // Time-accurate reference on the model grid: RK4 at half the smallest step.
  double dt_min = std::min(b.ex_dt, b.im_dt);
  for (double dt : b.cost_dts) dt_min = std::min(dt_min, dt);
  HybridModel truth = make_truth_model(c, 1);
  const Tensor tflat(truth.params->values());
  std::shared_ptr<const Tensor> steady;
  if (!truth.time_dependent) steady = std::make_shared<const Tensor>(truth.coefficients(tflat, 0.0));
  TimeRhsFn rhs = [&](double t, const Vector& u) {
    return truth.rhs(Tensor(u), steady ? *steady : truth.coefficients(tflat, t)).value();
  };
  const Vector ref =
      rk4_reference_rollout(rhs, ic, 0.5 * dt_min, {0.0, b.cost_t_end}, c.nx, c.ny).fields.back();

  HybridModel model = make_learned_model(c);
  const Vector p0 = model.params->values();
  std::vector<CostRow> rows;
  auto measure = [&](const std::string& variant, Stepper st, double dt, int k_fixed, int cp) {
    RolloutConfig rc = rollout_config(c, b.cost_t_end);
    rc.stepper = st;
    rc.dt = dt;
    rc.k_fixed = k_fixed;
    rc.checkpoint_every = cp;
    CostRow r{variant, to_string(st), dt, st == Stepper::NaiveUnrolled ? k_fixed : 0, cp, rc.steps()};
    // Accuracy with truth coefficients isolates the time-stepping error.
    RolloutConfig tr = rc;
    tr.checkpoint_every = 0;
    try {
      r.error = relative_error_l1(rollout(truth, Tensor(ic), tflat, tr, {0.0, b.cost_t_end}).states.back().value(), ref).value;
    } catch (const NumericalError&) {
      r.error = kDivergedError;
    }
    // Memory and time of one training step with the learned model.
    const auto t0 = clock::now();
    Tape tape;
    Tensor flat = tape.leaf(p0);
    try {
      Trajectory traj = rollout(model, Tensor(ic), flat, rc, {0.0, b.cost_t_end});
      Tensor loss = mean(square(traj.states.back() - Tensor(ref)));
      tape.backward(loss);
    } catch (const NumericalError&) {
      r.error = kDivergedError;
    }
    const TapeStats ts = tape.stats();
    r.peak_nodes = ts.peak_nodes;
    r.peak_scalars = ts.peak_stored_scalars;
    r.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    rows.push_back(r);
  };
  for (double dt : b.cost_dts) measure("ex", Stepper::ExplicitEuler, dt, 0, 0);
  for (double dt : b.cost_dts) measure("im", Stepper::ImplicitCN, dt, 0, 0);
  for (double dt : b.cost_dts) measure("im-cp", Stepper::ImplicitCN, dt, 0, b.cost_checkpoint_every);
  for (int k : b.k_values) measure("naive", Stepper::NaiveUnrolled, b.im_dt, k, 0);
  measure("ex-ref", Stepper::ExplicitEuler, b.ex_dt, 0, 0);
  measure("im-ref", Stepper::ImplicitCN, b.im_dt, 0, 0);

  io::CsvTable table(out / "bench_cost.csv", {"variant", "stepper", "dt", "k_fixed", "checkpoint_every", "steps",
                                              "peak_nodes", "peak_scalars", "l1_error", "seconds_per_epoch"});
  std::vector<std::string> labels;
  std::vector<double> bars;
  for (const CostRow& r : rows) {
    table.append({r.variant, r.stepper, io::format_double(r.dt), std::to_string(r.k_fixed),
                  std::to_string(r.checkpoint_every), std::to_string(r.steps), std::to_string(r.peak_nodes),
                  std::to_string(r.peak_scalars), io::format_double(r.error), io::format_double(r.seconds)});
    std::ostringstream label;
    label << r.variant << " dt=" << r.dt;
    if (r.variant == "naive") label << " K=" << r.k_fixed;
    labels.push_back(label.str());
    bars.push_back(static_cast<double>(r.peak_scalars));
  }
  table.flush();
  io::write_bar_chart_png(out / "bench_cost.png", labels, bars);
  return rows;
}

// ---------------------------------------------------------------------------
// CVI training and evaluation

namespace {

TrainSummary train_cvi(const ExperimentConfig& c, const Dataset& data, bool force) {
  const fs::path out = c.out_path();
  const fs::path ckpt = out / "checkpoint.json";
  const CviSetup setup = cvi_setup(c);
  CviModel m = make_cvi_model(c);
  Vector params = m.params->values();
  AdamState adam;
  adam.lr = c.lr;
  int epoch = 0;
  io::CsvTable metrics(out / "metrics.csv", kMetricHeader);
  if (fs::exists(ckpt) && !force) {
    Checkpoint ck = read_checkpoint(ckpt, c, *m.params);
    params = ck.params;
    adam = ck.adam;
    adam.lr = c.lr;
    epoch = ck.epoch;
    if (fs::exists(out / "metrics.csv")) {
      metrics.load_existing();
      std::vector<io::CsvRow> keep;
      for (const io::CsvRow& r : metrics.rows())
        if (std::stoi(r[0]) < epoch) keep.push_back(r);
      metrics = io::CsvTable(out / "metrics.csv", kMetricHeader);
      for (io::CsvRow& r : keep) metrics.append(std::move(r));
    }
  }
  metrics.flush();
  TrainSummary summary;
  summary.start_epoch = epoch;
  const CviRolloutConfig rc = cvi_rollout_config(c, c.cvi.snapshot_steps.back());
  int bad = 0;
  for (; epoch < c.epochs; ++epoch) {
    const auto t0 = clock::now();
    EpochMetrics em;
    em.epoch = epoch;
    std::vector<Vector> pred, truth;
    for (const Sample& smp : data.samples) {
      if (smp.split != "train") continue;
      Tape tape;
      Tensor flat = tape.leaf(params);
      CviCoefficientFn co = [&](const Tensor& f, const Tensor& e) { return m.ops.evaluate(*m.params, f, e); };
      try {
        const Tensor eps0(smp.fields[0]);
        auto r = cvi_rollout(setup.grid, co, eps0, flat, rc);
        auto snaps = cvi_snapshots(c, r, eps0);
        Tensor loss = Tensor::scalar(0.0);
        for (std::size_t k = 1; k < snaps.size(); ++k) {
          loss = loss + mean(square(snaps[k] - Tensor(smp.fields[k])));
          pred.push_back(snaps[k].value());
          truth.push_back(smp.fields[k]);
        }
        if (c.reg_weight != 0.0) loss = loss + c.reg_weight * m.params->regularizer(flat);
        if (!std::isfinite(loss.item())) throw NumericalError("non-finite loss");
        Vector grad = tape.backward(loss).of(flat);
        em.loss += loss.item();
        adam_step(params, grad, adam);
        bad = 0;
      } catch (const NumericalError& e) {
        if (++bad >= 5) {
          throw NumericalError("train: 5 consecutive non-finite losses, aborting at epoch " + std::to_string(epoch) +
                               " (last error: " + e.what() + ")");
        }
      }
      const TapeStats ts = tape.stats();
      em.peak_nodes = std::max(em.peak_nodes, ts.peak_nodes);
      em.peak_scalars = std::max(em.peak_scalars, ts.peak_stored_scalars);
    }
    em.state_l1 = pooled_error(pred, truth);
    em.field_l1 = cvi_field_error(c, m, params);
    em.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    metrics.append(metric_row(em));
    metrics.flush();
    summary.final_loss = em.loss;
    if ((epoch + 1) % c.save_every == 0) write_checkpoint(ckpt, c, *m.params, params, adam, epoch + 1);
  }
  write_checkpoint(ckpt, c, *m.params, params, adam, epoch);
  summary.final_epoch = epoch;
  summary.params = params;
  summary.train_state_error = cvi_training_error(c, m, params, data.samples);
  summary.field_error = cvi_field_error(c, m, params);
  write_json(out / "train_summary.json", {{"start_epoch", summary.start_epoch},
                                          {"final_epoch", summary.final_epoch},
                                          {"final_loss", summary.final_loss},
                                          {"train_state_error", summary.train_state_error},
                                          {"field_error", summary.field_error}});
  return summary;
}

EvalSummary eval_cvi(const ExperimentConfig& c, const Dataset& data, const fs::path& ckpt_path) {
  const CviSetup setup = cvi_setup(c);
  CviModel m = make_cvi_model(c);
  const Checkpoint ck = read_checkpoint(ckpt_path, c, *m.params);
  const fs::path out = c.out_path();
  CviCoefficientFn co = [&](const Tensor& f, const Tensor& e) { return m.ops.evaluate(*m.params, f, e); };
  EvalSummary s;
  s.train_state_error = cvi_training_error(c, m, ck.params, data.samples);
  std::map<std::string, std::pair<std::vector<Vector>, std::vector<Vector>>> pooled;
  for (const Sample& smp : data.samples) {
    const Tensor eps0(smp.fields[0]);
    auto r = cvi_rollout(setup.grid, co, eps0, Tensor(ck.params), cvi_rollout_config(c, c.cvi.snapshot_steps.back()));
    auto snaps = cvi_snapshots(c, r, eps0);
    for (std::size_t k = 1; k < snaps.size(); ++k) {
      s.rows.push_back({smp.id, smp.split, smp.length_scale, smp.times[k],
                        relative_error_l1(snaps[k].value(), smp.fields[k]).value});
      pooled[smp.split].first.push_back(snaps[k].value());
      pooled[smp.split].second.push_back(smp.fields[k]);
    }
  }
  auto pooled_for = [&](const char* split) {
    auto it = pooled.find(split);
    return it == pooled.end() ? 0.0 : pooled_error(it->second.first, it->second.second);
  };
  s.train_horizon_error = pooled_for("train");
  s.test_horizon_error = pooled_for("test");
  s.field_error = cvi_field_error(c, m, ck.params);
  io::CsvTable table(out / "eval_errors.csv", {"sample", "split", "length_scale", "time", "state_l1_error"});
  for (const EvalRow& r : s.rows)
    table.append({r.sample, r.split, io::format_double(r.length_scale), io::format_double(r.time),
                  io::format_double(r.state_error)});
  table.flush();
  write_json(out / "eval_summary.json", {{"checkpoint_epoch", ck.epoch},
                                         {"train_state_error", s.train_state_error},
                                         {"train_horizon_error", s.train_horizon_error},
                                         {"test_horizon_error", s.test_horizon_error},
                                         {"field_error", s.field_error}});
  return s;
}

}  // namespace

}  // namespace imdiff::exp
