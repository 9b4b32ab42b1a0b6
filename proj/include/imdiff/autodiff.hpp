#pragma once

/// \file autodiff.hpp
/// Higher-level reverse-mode facilities on top of the tape: user-defined VJP
/// nodes, checkpointed segments, and a central-difference gradient oracle.

#include "imdiff/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace imdiff {

/// Forward function of a custom node.  Runs with recording suspended.
using CustomForward = std::function<Tensor(std::span<const Tensor> inputs)>;

/// Backward function of a custom node: given the output cotangent, the
/// (constant) output and the (constant) inputs, returns one cotangent per
/// input.  An empty Vector stands for a zero cotangent.
using CustomBackward =
    std::function<std::vector<Vector>(const Vector& cotangent, const Tensor& output, std::span<const Tensor> inputs)>;

/// A differentiable operation whose VJP is supplied by the caller.  Applying
/// it appends exactly one node regardless of what the forward computes.
class CustomVjp {
 public:
  CustomVjp(std::string name, CustomForward forward, CustomBackward backward);

  Tensor operator()(std::vector<Tensor> inputs) const;
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  CustomForward forward_;
  CustomBackward backward_;
};

CustomVjp custom_vjp(std::string name, CustomForward forward, CustomBackward backward);

/// A pure segment mapping inputs to one or more outputs.
using SegmentFn = std::function<std::vector<Tensor>(std::span<const Tensor> inputs)>;

/// Runs \p segment without recording its interior and appends a single node.
/// On backward the segment is re-executed on a child tape to obtain the
/// interior cotangents.  \p segment must be pure and may only depend on
/// tracked values through \p inputs.
std::vector<Tensor> checkpoint(const SegmentFn& segment, std::vector<Tensor> inputs);

/// Single-output convenience overload.
Tensor checkpoint(const std::function<Tensor(std::span<const Tensor>)>& segment, std::vector<Tensor> inputs);

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per coordinate.
Vector finite_diff_grad(const std::function<double(const Vector&)>& f, const Vector& x, double eps);

/// Directional central difference (f(x + eps d) - f(x - eps d)) / (2 eps).
double finite_diff_directional(const std::function<double(const Vector&)>& f, const Vector& x,
                               const Vector& direction, double eps);

}  // namespace imdiff
