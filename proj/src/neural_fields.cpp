#include "imdiff/neural_fields.hpp"

#include "imdiff/ops.hpp"

#include <cmath>
#include <numbers>

namespace imdiff {
namespace {

void fill_uniform(Vector& v, Index offset, Index n, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Index i = 0; i < n; ++i) v[offset + i] = u(rng);
}

Tensor as_batch(const Tensor& x, Index dim, const char* who) {
  if (x.rank() == 1 && x.size() == dim) return reshape(x, {1, dim});
  if (x.rank() == 2 && x.shape()[1] == dim) return x;
  throw ShapeError(std::string(who) + ": expected coordinates {N, " + std::to_string(dim) + "}, got " +
                   shape_string(x.shape()));
}

}  // namespace

DenseStack::DenseStack(std::vector<Index> widths) : widths_(std::move(widths)) {
  if (widths_.size() < 2) throw std::invalid_argument("DenseStack: need at least input and output widths");
  for (Index w : widths_)
    if (w <= 0) throw std::invalid_argument("DenseStack: widths must be positive");
}

Index DenseStack::param_count() const {
  Index n = 0;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) n += widths_[l + 1] * (widths_[l] + 1);
  return n;
}

Index DenseStack::weight_offset(std::size_t layer) const {
  Index off = 0;
  for (std::size_t l = 0; l < layer; ++l) off += widths_[l + 1] * (widths_[l] + 1);
  return off;
}

Index DenseStack::bias_offset(std::size_t layer) const {
  return weight_offset(layer) + widths_[layer + 1] * widths_[layer];
}

Tensor DenseStack::weight(const Tensor& flat, std::size_t layer) const {
  return slice(flat, weight_offset(layer), {widths_[layer + 1], widths_[layer]});
}

Tensor DenseStack::bias(const Tensor& flat, std::size_t layer) const {
  return slice(flat, bias_offset(layer), {widths_[layer + 1]});
}

Tensor HyperNet::forward(const Tensor& params, const Tensor& c) const {
  if (params.size() != param_count()) throw ShapeError("HyperNet: wrong parameter count");
  if (c.size() != cond_dim()) {
    throw ShapeError("HyperNet: condition has length " + std::to_string(c.size()) + ", expected " +
                     std::to_string(cond_dim()));
  }
  Tensor z = reshape(c, {cond_dim()});
  for (std::size_t l = 0; l < stack_.layers(); ++l) {
    z = dense(z, stack_.weight(params, l), stack_.bias(params, l));
    if (l + 1 < stack_.layers()) z = tanh(z);
  }
  return z;
}

Vector HyperNet::init(std::mt19937_64& rng) const {
  Vector v(param_count());
  const auto& w = stack_.widths();
  for (std::size_t l = 0; l < stack_.layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w[l]));
    fill_uniform(v, stack_.weight_offset(l), w[l + 1] * (w[l] + 1), bound, rng);
  }
  return v;
}

SirenNet::SirenNet(std::vector<Index> widths, double omega0) : stack_(std::move(widths)), omega0_(omega0) {
  if (stack_.layers() < 2) throw std::invalid_argument("SirenNet: need at least one hidden layer");
}

Tensor SirenNet::first_preactivation(const Tensor& params, const Tensor& coords) const {
  Tensor x = as_batch(coords, coord_dim(), "SirenNet");
  return omega0_ * dense(x, stack_.weight(params, 0), stack_.bias(params, 0));
}

Tensor SirenNet::forward(const Tensor& params, const Tensor& coords) const {
  if (params.size() != param_count()) {
    throw ShapeError("SirenNet: expected " + std::to_string(param_count()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  Tensor z = sin(first_preactivation(params, coords));
  const std::size_t last = stack_.layers() - 1;
  for (std::size_t l = 1; l < last; ++l) z = sin(dense(z, stack_.weight(params, l), stack_.bias(params, l)));
  return dense(z, stack_.weight(params, last), stack_.bias(params, last));
}

Vector SirenNet::init(std::mt19937_64& rng) const {
  Vector v(param_count());
  const auto& w = stack_.widths();
  for (std::size_t l = 0; l < stack_.layers(); ++l) {
    const double d = static_cast<double>(w[l]);
    const double wb = l == 0 ? 1.0 / d : std::sqrt(6.0 / d) / omega0_;
    fill_uniform(v, stack_.weight_offset(l), w[l + 1] * w[l], wb, rng);
    fill_uniform(v, stack_.bias_offset(l), w[l + 1], 1.0 / std::sqrt(d), rng);
  }
  return v;
}

Tensor Projector::forward(const Tensor& weight, const Tensor& bias, const Tensor& h) const {
  if (h.size() != latent_) throw ShapeError("Projector: latent code has wrong length");
  return matvec(reshape(weight, {out_, latent_}), reshape(h, {latent_})) + bias;
}

Vector encode_time(double t, double period) {
  const double a = 2.0 * std::numbers::pi * t / period;
  Vector c(3);
  c << std::sin(a), std::cos(a), t / period;
  return c;
}

Cnf::Cnf(CnfConfig config, ParamSet& params, std::string prefix)
    : config_(std::move(config)), prefix_(std::move(prefix)) {
  if (config_.mode == FieldMode::Dynamic) config_.cond_dim = 3;
  std::vector<Index> hw{config_.cond_dim};
  hw.insert(hw.end(), config_.hyper_hidden.begin(), config_.hyper_hidden.end());
  hw.push_back(config_.latent_dim);
  hyper_ = HyperNet(hw);

  std::vector<Index> sw{config_.coord_dim};
  sw.insert(sw.end(), config_.siren_hidden.begin(), config_.siren_hidden.end());
  sw.push_back(config_.out_dim);
  siren_ = SirenNet(sw, config_.omega0);
  proj_ = Projector(config_.latent_dim, siren_.param_count());

  if (!config_.softplus.empty() && static_cast<Index>(config_.softplus.size()) != config_.out_dim) {
    throw std::invalid_argument("Cnf: softplus flags must match out_dim");
  }

  params.add(seg("hyper"), hyper_.param_count());
  params.add(seg("proj_w"), siren_.param_count() * config_.latent_dim);
  params.add(seg("proj_b"), siren_.param_count());
  params.add(seg("gain"), config_.out_dim, false);
  params.add(seg("offset"), config_.out_dim, false);
  if (config_.mode == FieldMode::Steady) params.add(seg("cond"), config_.cond_dim, false);
}

void Cnf::initialize(ParamSet& params, std::mt19937_64& rng) const {
  params.set(seg("hyper"), hyper_.init(rng));
  Vector pw(siren_.param_count() * config_.latent_dim);
  fill_uniform(pw, 0, pw.size(), config_.projector_init_scale / std::sqrt(static_cast<double>(config_.latent_dim)),
               rng);
  params.set(seg("proj_w"), pw);
  params.set(seg("proj_b"), siren_.init(rng));
  Vector gain = Vector::Ones(config_.out_dim), offset = Vector::Zero(config_.out_dim);
  for (std::size_t k = 0; k < config_.gain_init.size(); ++k) gain[static_cast<Index>(k)] = config_.gain_init[k];
  for (std::size_t k = 0; k < config_.offset_init.size(); ++k) offset[static_cast<Index>(k)] = config_.offset_init[k];
  params.set(seg("gain"), gain);
  params.set(seg("offset"), offset);
  if (config_.mode == FieldMode::Steady) {
    Vector c(config_.cond_dim);
    fill_uniform(c, 0, c.size(), 1.0, rng);
    params.set(seg("cond"), c);
  }
}

Tensor Cnf::condition(const ParamSet& params, const Tensor& flat, double t) const {
  if (config_.mode == FieldMode::Steady) return params.view(flat, seg("cond"));
  return Tensor(encode_time(t, config_.period));
}

Tensor Cnf::siren_params(const ParamSet& params, const Tensor& flat, const Tensor& c) const {
  Tensor h = hyper_.forward(params.view(flat, seg("hyper")), c);
  return proj_.forward(params.view(flat, seg("proj_w")), params.view(flat, seg("proj_b")), h);
}

Tensor Cnf::eval_raw(const ParamSet& params, const Tensor& flat, const Tensor& coords, const Tensor& c) const {
  return siren_.forward(siren_params(params, flat, c), coords);
}

std::vector<Tensor> Cnf::eval(const ParamSet& params, const Tensor& flat, const Tensor& coords,
                              const Tensor& c) const {
  Tensor raw = eval_raw(params, flat, coords, c);
  const Index n = raw.shape()[0];
  const Index k_out = config_.out_dim;
  Tensor gain = params.view(flat, seg("gain"));
  Tensor offset = params.view(flat, seg("offset"));
  std::vector<Tensor> out;
  for (Index k = 0; k < k_out; ++k) {
    Tensor ch = raw;
    if (k_out > 1) {
      auto idx = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) (*idx)[static_cast<std::size_t>(i)] = i * k_out + k;
      ch = gather(raw, std::move(idx), {n});
    } else {
      ch = reshape(raw, {n});
    }
    ch = slice(gain, k, {}) * ch + slice(offset, k, {});
    if (!config_.softplus.empty() && config_.softplus[static_cast<std::size_t>(k)]) ch = softplus(ch);
    out.push_back(ch);
  }
  return out;
}

std::vector<Tensor> time_conditioned_field(const Cnf& cnf, const ParamSet& params, const Tensor& flat,
                                           const Tensor& coords, double t) {
  return cnf.eval(params, flat, coords, cnf.condition(params, flat, t));
}

Tensor normalized_cell_centers(Index nx, Index ny) {
  Vector v(2 * nx * ny);
  for (Index j = 0; j < ny; ++j) {
    for (Index i = 0; i < nx; ++i) {
      const Index c = i + nx * j;
      v[2 * c] = -1.0 + (2.0 * i + 1.0) / static_cast<double>(nx);
      v[2 * c + 1] = -1.0 + (2.0 * j + 1.0) / static_cast<double>(ny);
    }
  }
  return Tensor({nx * ny, 2}, std::move(v));
}

}  // namespace imdiff
