#pragma once

/// \file ops.hpp
/// Differentiable primitives over Tensor.  Each call appends at most one node.
///
/// Binary elementwise ops accept equal shapes or a size-1 operand on either
/// side (scalar broadcast); nothing else broadcasts.

#include "imdiff/tensor.hpp"

#include <memory>
#include <vector>

namespace imdiff {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

/// c * a for a constant c.
Tensor scale(const Tensor& a, double c);
/// a + c for a constant c.
Tensor shift(const Tensor& a, double c);

Tensor neg(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
/// log(1 + exp(a)), evaluated stably.
Tensor softplus(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// A (m x n, row-major) times x (n).
Tensor matvec(const Tensor& A, const Tensor& x);
/// A (m x k) times B (k x n), both row-major.
Tensor matmul(const Tensor& A, const Tensor& B);
/// Batched affine layer: rows of X (N x in) mapped by W (out x in) and b (out).
Tensor dense(const Tensor& X, const Tensor& W, const Tensor& b);

/// out[i] = a[indices[i]]; cotangents scatter-add back.
Tensor gather(const Tensor& a, std::shared_ptr<const std::vector<Index>> indices, Shape out_shape = {});
/// Contiguous window [offset, offset + prod(shape)) viewed with \p shape.
Tensor slice(const Tensor& a, Index offset, Shape shape);
Tensor concat(std::span<const Tensor> parts);
Tensor reshape(const Tensor& a, Shape shape);

/// Fixed-width sparse linear map with constant weights:
/// out[i] = sum_k weights[i*width + k] * x[indices[i*width + k]].
struct Stencil {
  Index rows = 0;
  Index cols = 0;
  Index width = 0;
  std::vector<Index> indices;
  std::vector<double> weights;

  Vector apply(const Vector& x) const;
  Vector apply_transpose(const Vector& y) const;
};

Tensor stencil_apply(const Tensor& x, std::shared_ptr<const Stencil> stencil);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a);
Tensor operator*(double c, const Tensor& a);
Tensor operator*(const Tensor& a, double c);
Tensor operator+(const Tensor& a, double c);
Tensor operator-(const Tensor& a, double c);

}  // namespace imdiff
