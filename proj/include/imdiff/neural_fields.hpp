#pragma once

/// \file neural_fields.hpp
/// Conditional neural field: HyperNet(c) -> latent h -> Projector -> SIREN
/// weights theta_b -> field values at arbitrary coordinates.  All modules
/// read their weights from segments of a flat ParamSet tensor, so gradients
/// flow to every trainable scalar through one leaf.

#include "imdiff/params.hpp"
#include "imdiff/tensor.hpp"

#include <random>
#include <string>
#include <vector>

namespace imdiff {

/// Parameter layout of a stack of dense layers: for each layer, W (out x in,
/// row-major) followed by b (out).
class DenseStack {
 public:
  DenseStack() = default;
  explicit DenseStack(std::vector<Index> widths);

  const std::vector<Index>& widths() const { return widths_; }
  std::size_t layers() const { return widths_.size() - 1; }
  Index in_dim() const { return widths_.front(); }
  Index out_dim() const { return widths_.back(); }
  Index param_count() const;

  Tensor weight(const Tensor& flat, std::size_t layer) const;
  Tensor bias(const Tensor& flat, std::size_t layer) const;
  Index weight_offset(std::size_t layer) const;
  Index bias_offset(std::size_t layer) const;

 private:
  std::vector<Index> widths_;
};

/// Fully connected network with tanh hidden activations and a linear output.
class HyperNet {
 public:
  HyperNet() = default;
  explicit HyperNet(std::vector<Index> widths) : stack_(std::move(widths)) {}

  Index param_count() const { return stack_.param_count(); }
  Index cond_dim() const { return stack_.in_dim(); }
  Index latent_dim() const { return stack_.out_dim(); }

  /// \p params: flat segment of length param_count(); \p c: length cond_dim().
  Tensor forward(const Tensor& params, const Tensor& c) const;
  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
  Vector init(std::mt19937_64& rng) const;
  const DenseStack& layout() const { return stack_; }

 private:
  DenseStack stack_;
};

/// Coordinate network: sin(omega0 (W z + b)) on the first layer, sin(W z + b)
/// on later hidden layers, affine output.
class SirenNet {
 public:
  SirenNet() = default;
  SirenNet(std::vector<Index> widths, double omega0);

  Index param_count() const { return stack_.param_count(); }
  Index coord_dim() const { return stack_.in_dim(); }
  Index out_dim() const { return stack_.out_dim(); }
  double omega0() const { return omega0_; }

  /// \p coords: {N, coord_dim}.  Returns {N, out_dim}.
  Tensor forward(const Tensor& params, const Tensor& coords) const;
  /// omega0 (W_1 x + b_1) for the first layer, {N, width_1}.
  Tensor first_preactivation(const Tensor& params, const Tensor& coords) const;
  /// First layer W ~ U(-1/d, 1/d); later W ~ U(-sqrt(6/d)/omega0, sqrt(6/d)/omega0);
  /// biases ~ U(-1/sqrt(d), 1/sqrt(d)).
  Vector init(std::mt19937_64& rng) const;
  const DenseStack& layout() const { return stack_; }

 private:
  DenseStack stack_;
  double omega0_ = 30.0;
};

/// theta_b = W_proj h + b_proj with W_proj of shape {out, latent}.
class Projector {
 public:
  Projector() = default;
  Projector(Index latent_dim, Index out_dim) : latent_(latent_dim), out_(out_dim) {}

  Index latent_dim() const { return latent_; }
  Index out_dim() const { return out_; }
  Tensor forward(const Tensor& weight, const Tensor& bias, const Tensor& h) const;

 private:
  Index latent_ = 0;
  Index out_ = 0;
};

enum class FieldMode { Steady, Dynamic };

struct CnfConfig {
  FieldMode mode = FieldMode::Steady;
  Index cond_dim = 4;  ///< steady mode only; dynamic mode uses 3
  std::vector<Index> hyper_hidden{64, 64};
  Index latent_dim = 16;
  std::vector<Index> siren_hidden{32, 32};
  Index coord_dim = 2;
  Index out_dim = 1;
  double omega0 = 30.0;
  double period = 1.0;                  ///< T in the time encoding
  std::vector<bool> softplus;           ///< per output channel; empty = none
  std::vector<double> gain_init;        ///< per channel; empty = 1
  std::vector<double> offset_init;      ///< per channel; empty = 0
  double projector_init_scale = 1e-2;
};

/// (sin 2 pi t / T, cos 2 pi t / T, t / T)
Vector encode_time(double t, double period);

/// Conditional neural field registered under a name prefix in a ParamSet.
/// Segments: <p>.hyper, <p>.proj_w, <p>.proj_b, <p>.gain, <p>.offset and,
/// in steady mode, <p>.cond.
class Cnf {
 public:
  Cnf() = default;
  Cnf(CnfConfig config, ParamSet& params, std::string prefix);

  const CnfConfig& config() const { return config_; }
  const std::string& prefix() const { return prefix_; }
  const HyperNet& hypernet() const { return hyper_; }
  const SirenNet& siren() const { return siren_; }
  Index out_dim() const { return config_.out_dim; }

  /// Fills this field's segments of \p params.
  void initialize(ParamSet& params, std::mt19937_64& rng) const;

  /// Condition vector: learned constant (steady) or time encoding (dynamic).
  Tensor condition(const ParamSet& params, const Tensor& flat, double t) const;
  /// SIREN weights generated from condition \p c.
  Tensor siren_params(const ParamSet& params, const Tensor& flat, const Tensor& c) const;
  /// Raw field values {N, out_dim} at \p coords {N, coord_dim}, before the
  /// output affine and softplus.
  Tensor eval_raw(const ParamSet& params, const Tensor& flat, const Tensor& coords, const Tensor& c) const;
  /// One tensor of length N per output channel, after gain/offset and softplus.
  std::vector<Tensor> eval(const ParamSet& params, const Tensor& flat, const Tensor& coords, const Tensor& c) const;

 private:
  std::string seg(const char* name) const { return prefix_ + "." + name; }

  CnfConfig config_;
  std::string prefix_;
  HyperNet hyper_;
  Projector proj_;
  SirenNet siren_;
};

/// Field channels at time \p t; steady fields ignore t.
std::vector<Tensor> time_conditioned_field(const Cnf& cnf, const ParamSet& params, const Tensor& flat,
                                           const Tensor& coords, double t);

/// Cell-centre coordinates of an nx x ny grid mapped to [-1, 1]^2, {nx*ny, 2}
/// in row-major cell order (i + nx j).
Tensor normalized_cell_centers(Index nx, Index ny);

}  // namespace imdiff
