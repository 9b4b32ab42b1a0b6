#include "imdiff/autodiff.hpp"

#include "imdiff/ops.hpp"

#include <stdexcept>

namespace imdiff {

CustomVjp::CustomVjp(std::string name, CustomForward forward, CustomBackward backward)
    : name_(std::move(name)), forward_(std::move(forward)), backward_(std::move(backward)) {}

Tensor CustomVjp::operator()(std::vector<Tensor> inputs) const {
  Tape* tape = active_tape(inputs, name_);
  Tensor out;
  if (tape) {
    Tape::Pause pause(*tape);
    out = forward_(inputs);
  } else {
    out = forward_(inputs);
  }
  out = out.detach();
  if (!tape) return out;

  std::vector<Tensor> frozen;
  frozen.reserve(inputs.size());
  std::vector<std::shared_ptr<const Vector>> saved;
  for (const Tensor& in : inputs) {
    frozen.push_back(in.detach());
    saved.push_back(in.buffer());
  }
  saved.push_back(out.buffer());

  auto backward = backward_;
  auto name = name_;
  Tensor frozen_out = out;
  return tape->record(
      name_, inputs, out,
      [backward, frozen, frozen_out, name](const Vector& g) {
        std::vector<Vector> cots = backward(g, frozen_out, frozen);
        if (cots.size() != frozen.size()) {
          throw TapeError("custom node '" + name + "': backward returned " + std::to_string(cots.size()) +
                          " cotangents for " + std::to_string(frozen.size()) + " inputs");
        }
        for (std::size_t k = 0; k < cots.size(); ++k) {
          if (cots[k].size() != 0 && cots[k].size() != frozen[k].size()) {
            throw TapeError("custom node '" + name + "': cotangent " + std::to_string(k) + " has length " +
                            std::to_string(cots[k].size()) + ", expected " + std::to_string(frozen[k].size()));
          }
        }
        return cots;
      },
      saved);
}

CustomVjp custom_vjp(std::string name, CustomForward forward, CustomBackward backward) {
  return CustomVjp(std::move(name), std::move(forward), std::move(backward));
}

std::vector<Tensor> checkpoint(const SegmentFn& segment, std::vector<Tensor> inputs) {
  Tape* tape = active_tape(inputs, "checkpoint");
  if (!tape) return segment(inputs);

  std::vector<Tensor> outs;
  {
    Tape::Pause pause(*tape);
    outs = segment(inputs);
  }
  std::vector<Index> sizes;
  std::vector<Shape> shapes;
  for (const Tensor& o : outs) {
    sizes.push_back(o.size());
    shapes.push_back(o.shape());
  }
  Tensor packed = concat(outs);

  std::vector<Tensor> frozen;
  std::vector<bool> differentiable;
  std::vector<std::shared_ptr<const Vector>> saved;
  for (const Tensor& in : inputs) {
    frozen.push_back(in.detach());
    differentiable.push_back(in.tracked());
    saved.push_back(in.buffer());
  }

  Tape* parent = tape;
  Tensor node = tape->record(
      "checkpoint", inputs, packed,
      [segment, frozen, differentiable, parent](const Vector& g) {
        Tape sub(parent);
        std::vector<Tensor> local;
        local.reserve(frozen.size());
        for (std::size_t k = 0; k < frozen.size(); ++k) {
          local.push_back(differentiable[k] ? sub.leaf(frozen[k]) : frozen[k]);
        }
        std::vector<Tensor> outs = segment(local);
        Tensor packed_local = concat(outs);
        if (packed_local.size() != g.size()) {
          throw TapeError("checkpoint: recomputed segment changed its output size");
        }
        GradMap grads = sub.vjp(packed_local, g);
        std::vector<Vector> cots;
        cots.reserve(local.size());
        for (std::size_t k = 0; k < local.size(); ++k) {
          cots.push_back(differentiable[k] ? grads.of(local[k]) : Vector());
        }
        return cots;
      },
      saved);

  std::vector<Tensor> result;
  Index off = 0;
  for (std::size_t k = 0; k < outs.size(); ++k) {
    result.push_back(slice(node, off, shapes[k]));
    off += sizes[k];
  }
  return result;
}

Tensor checkpoint(const std::function<Tensor(std::span<const Tensor>)>& segment, std::vector<Tensor> inputs) {
  SegmentFn wrapped = [segment](std::span<const Tensor> in) { return std::vector<Tensor>{segment(in)}; };
  return checkpoint(wrapped, std::move(inputs)).front();
}

Vector finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  Vector g(x.size());
  Vector probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double fp = f(probe);
    probe[i] = x[i] - eps;
    const double fm = f(probe);
    probe[i] = x[i];
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

double finite_diff_directional(const std::function<double(const Vector&)>& f, const Vector& x,
                               const Vector& direction, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_directional: eps must be positive");
  return (f(x + eps * direction) - f(x - eps * direction)) / (2.0 * eps);
}

}  // namespace imdiff
