#include "imdiff/ops.hpp"

#include <cmath>
#include <numeric>

namespace imdiff {
namespace {

using Array = Eigen::ArrayXd;
using Buffer = std::shared_ptr<const Vector>;

enum class Broadcast { None, Left, Right };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.size() == b.size() && (a.shape() == b.shape() || a.size() == 1)) return Broadcast::None;
  if (a.size() == 1) return Broadcast::Left;
  if (b.size() == 1) return Broadcast::Right;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                   shape_string(b.shape()));
}

Shape result_shape(const Tensor& a, const Tensor& b, Broadcast kind) {
  return kind == Broadcast::Left ? b.shape() : a.shape();
}

// Full-length array view of an operand, expanding a broadcast scalar.
Array expand(const Vector& v, Index n) {
  if (v.size() == n) return v.array();
  return Array::Constant(n, v[0]);
}

Vector reduce_to(Vector g, Index size) {
  if (g.size() == size) return g;
  return Vector::Constant(1, g.sum());
}

Tensor emit(Tape* tape, std::string_view op, std::initializer_list<Tensor> inputs, Tensor out, VjpFn vjp,
            std::initializer_list<Buffer> saved = {}) {
  if (!tape) return out;
  std::vector<Tensor> ins(inputs);
  std::vector<Buffer> keep(saved);
  return tape->record(op, ins, std::move(out), std::move(vjp), keep);
}

Tape* tape_of(std::string_view op, std::initializer_list<Tensor> inputs) {
  std::vector<Tensor> ins(inputs);
  return active_tape(ins, op);
}

void require_rank(const Tensor& t, Index rank, std::string_view op, std::string_view what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + std::string(what) + " must have rank " + std::to_string(rank) +
                     ", got shape " + shape_string(t.shape()));
  }
}

Eigen::Map<const RowMatrix> as_matrix(const Vector& v, Index rows, Index cols) {
  return Eigen::Map<const RowMatrix>(v.data(), rows, cols);
}

Vector flatten(const RowMatrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise binary

Tensor add(const Tensor& a, const Tensor& b) {
  const auto kind = broadcast_kind(a, b, "add");
  const Shape shape = result_shape(a, b, kind);
  const Index n = shape_size(shape);
  Vector v = expand(a.value(), n) + expand(b.value(), n);
  Tape* tape = tape_of("add", {a, b});
  const Index na = a.size(), nb = b.size();
  return emit(tape, "add", {a, b}, Tensor(shape, std::move(v)), [na, nb](const Vector& g) {
    return std::vector<Vector>{reduce_to(g, na), reduce_to(g, nb)};
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto kind = broadcast_kind(a, b, "sub");
  const Shape shape = result_shape(a, b, kind);
  const Index n = shape_size(shape);
  Vector v = expand(a.value(), n) - expand(b.value(), n);
  Tape* tape = tape_of("sub", {a, b});
  const Index na = a.size(), nb = b.size();
  return emit(tape, "sub", {a, b}, Tensor(shape, std::move(v)), [na, nb](const Vector& g) {
    return std::vector<Vector>{reduce_to(g, na), reduce_to(-g, nb)};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto kind = broadcast_kind(a, b, "mul");
  const Shape shape = result_shape(a, b, kind);
  const Index n = shape_size(shape);
  Vector v = expand(a.value(), n) * expand(b.value(), n);
  Tape* tape = tape_of("mul", {a, b});
  if (!tape) return Tensor(shape, std::move(v));
  Buffer ba = a.buffer(), bb = b.buffer();
  return emit(
      tape, "mul", {a, b}, Tensor(shape, std::move(v)),
      [ba, bb, n](const Vector& g) {
        Vector ga = (g.array() * expand(*bb, n)).matrix();
        Vector gb = (g.array() * expand(*ba, n)).matrix();
        return std::vector<Vector>{reduce_to(std::move(ga), ba->size()), reduce_to(std::move(gb), bb->size())};
      },
      {ba, bb});
}

Tensor div(const Tensor& a, const Tensor& b) {
  const auto kind = broadcast_kind(a, b, "div");
  const Shape shape = result_shape(a, b, kind);
  const Index n = shape_size(shape);
  Vector v = expand(a.value(), n) / expand(b.value(), n);
  Tape* tape = tape_of("div", {a, b});
  if (!tape) return Tensor(shape, std::move(v));
  Buffer ba = a.buffer(), bb = b.buffer();
  return emit(
      tape, "div", {a, b}, Tensor(shape, std::move(v)),
      [ba, bb, n](const Vector& g) {
        const Array den = expand(*bb, n);
        Vector ga = (g.array() / den).matrix();
        Vector gb = (-g.array() * expand(*ba, n) / den.square()).matrix();
        return std::vector<Vector>{reduce_to(std::move(ga), ba->size()), reduce_to(std::move(gb), bb->size())};
      },
      {ba, bb});
}

Tensor scale(const Tensor& a, double c) {
  Tape* tape = tape_of("scale", {a});
  return emit(tape, "scale", {a}, Tensor(a.shape(), c * a.value()),
              [c](const Vector& g) { return std::vector<Vector>{c * g}; });
}

Tensor shift(const Tensor& a, double c) {
  Tape* tape = tape_of("shift", {a});
  return emit(tape, "shift", {a}, Tensor(a.shape(), (a.value().array() + c).matrix()),
              [](const Vector& g) { return std::vector<Vector>{g}; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Elementwise unary

Tensor sin(const Tensor& a) {
  Tape* tape = tape_of("sin", {a});
  Tensor out(a.shape(), a.value().unaryExpr([](double v) { return std::sin(v); }));
  if (!tape) return out;
  Buffer ba = a.buffer();
  return emit(
      tape, "sin", {a}, std::move(out),
      [ba](const Vector& g) { return std::vector<Vector>{(g.array() * ba->array().cos()).matrix()}; }, {ba});
}

Tensor tanh(const Tensor& a) {
  Tape* tape = tape_of("tanh", {a});
  Tensor out(a.shape(), a.value().unaryExpr([](double v) { return std::tanh(v); }));
  if (!tape) return out;
  Buffer by = out.buffer();
  return emit(
      tape, "tanh", {a}, out,
      [by](const Vector& g) {
        return std::vector<Vector>{(g.array() * (1.0 - by->array().square())).matrix()};
      },
      {by});
}

Tensor square(const Tensor& a) {
  Tape* tape = tape_of("square", {a});
  Tensor out(a.shape(), a.value().array().square().matrix());
  if (!tape) return out;
  Buffer ba = a.buffer();
  return emit(
      tape, "square", {a}, std::move(out),
      [ba](const Vector& g) { return std::vector<Vector>{(2.0 * g.array() * ba->array()).matrix()}; }, {ba});
}

Tensor abs(const Tensor& a) {
  Tape* tape = tape_of("abs", {a});
  Tensor out(a.shape(), a.value().cwiseAbs());
  if (!tape) return out;
  Buffer ba = a.buffer();
  return emit(
      tape, "abs", {a}, std::move(out),
      [ba](const Vector& g) {
        // sign(0) = 0: the subgradient at the kink is taken as zero.
        const Array s = (ba->array() > 0.0).cast<double>() - (ba->array() < 0.0).cast<double>();
        return std::vector<Vector>{(g.array() * s).matrix()};
      },
      {ba});
}

Tensor softplus(const Tensor& a) {
  Tape* tape = tape_of("softplus", {a});
  const Array x = a.value().array();
  Vector v = (x.max(0.0) + (-x.abs()).exp().log1p()).matrix();
  Tensor out(a.shape(), std::move(v));
  if (!tape) return out;
  Buffer ba = a.buffer();
  return emit(
      tape, "softplus", {a}, std::move(out),
      [ba](const Vector& g) {
        const Array sig = 1.0 / (1.0 + (-ba->array()).exp());
        return std::vector<Vector>{(g.array() * sig).matrix()};
      },
      {ba});
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  Tape* tape = tape_of("sum", {a});
  const Index n = a.size();
  return emit(tape, "sum", {a}, Tensor::scalar(a.value().sum()),
              [n](const Vector& g) { return std::vector<Vector>{Vector::Constant(n, g[0])}; });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  Tape* tape = tape_of("mean", {a});
  const Index n = a.size();
  return emit(tape, "mean", {a}, Tensor::scalar(a.value().mean()), [n](const Vector& g) {
    return std::vector<Vector>{Vector::Constant(n, g[0] / static_cast<double>(n))};
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matvec(const Tensor& A, const Tensor& x) {
  require_rank(A, 2, "matvec", "matrix");
  const Index m = A.shape()[0], n = A.shape()[1];
  if (x.size() != n) {
    throw ShapeError("matvec: matrix " + shape_string(A.shape()) + " incompatible with vector " +
                     shape_string(x.shape()));
  }
  Vector y = as_matrix(A.value(), m, n) * x.value();
  Tape* tape = tape_of("matvec", {A, x});
  if (!tape) return Tensor(Shape{m}, std::move(y));
  Buffer bA = A.buffer(), bx = x.buffer();
  return emit(
      tape, "matvec", {A, x}, Tensor(Shape{m}, std::move(y)),
      [bA, bx, m, n](const Vector& g) {
        RowMatrix gA = g * bx->transpose();
        Vector gx = as_matrix(*bA, m, n).transpose() * g;
        return std::vector<Vector>{flatten(gA), std::move(gx)};
      },
      {bA, bx});
}

Tensor matmul(const Tensor& A, const Tensor& B) {
  require_rank(A, 2, "matmul", "left operand");
  require_rank(B, 2, "matmul", "right operand");
  const Index m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
  if (B.shape()[0] != k) {
    throw ShapeError("matmul: shapes " + shape_string(A.shape()) + " and " + shape_string(B.shape()) +
                     " do not chain");
  }
  RowMatrix C = as_matrix(A.value(), m, k) * as_matrix(B.value(), k, n);
  Tape* tape = tape_of("matmul", {A, B});
  if (!tape) return Tensor(Shape{m, n}, flatten(C));
  Buffer bA = A.buffer(), bB = B.buffer();
  return emit(
      tape, "matmul", {A, B}, Tensor(Shape{m, n}, flatten(C)),
      [bA, bB, m, k, n](const Vector& g) {
        const auto G = as_matrix(g, m, n);
        RowMatrix gA = G * as_matrix(*bB, k, n).transpose();
        RowMatrix gB = as_matrix(*bA, m, k).transpose() * G;
        return std::vector<Vector>{flatten(gA), flatten(gB)};
      },
      {bA, bB});
}

Tensor dense(const Tensor& X, const Tensor& W, const Tensor& b) {
  require_rank(W, 2, "dense", "weight");
  const Index out = W.shape()[0], in = W.shape()[1];
  Index rows = 0;
  Shape out_shape;
  if (X.rank() == 1 && X.size() == in) {
    rows = 1;
    out_shape = {out};
  } else if (X.rank() == 2 && X.shape()[1] == in) {
    rows = X.shape()[0];
    out_shape = {rows, out};
  } else {
    throw ShapeError("dense: input " + shape_string(X.shape()) + " incompatible with weight " +
                     shape_string(W.shape()));
  }
  if (b.size() != out) {
    throw ShapeError("dense: bias " + shape_string(b.shape()) + " incompatible with weight " +
                     shape_string(W.shape()));
  }
  // Row-by-row so each output row depends only on its own input row, with a
  // summation order independent of the batch size.
  const auto Xm = as_matrix(X.value(), rows, in);
  const auto Wm = as_matrix(W.value(), out, in);
  RowMatrix Y(rows, out);
  for (Index r = 0; r < rows; ++r)
    for (Index o = 0; o < out; ++o) Y(r, o) = Xm.row(r).dot(Wm.row(o)) + b.value()[o];
  Tape* tape = tape_of("dense", {X, W, b});
  if (!tape) return Tensor(out_shape, flatten(Y));
  Buffer bX = X.buffer(), bW = W.buffer();
  return emit(
      tape, "dense", {X, W, b}, Tensor(out_shape, flatten(Y)),
      [bX, bW, rows, in, out](const Vector& g) {
        const auto G = as_matrix(g, rows, out);
        RowMatrix gX = G * as_matrix(*bW, out, in);
        RowMatrix gW = G.transpose() * as_matrix(*bX, rows, in);
        Vector gb = G.colwise().sum().transpose();
        return std::vector<Vector>{flatten(gX), flatten(gW), std::move(gb)};
      },
      {bX, bW});
}

// ---------------------------------------------------------------------------
// Indexing

Tensor gather(const Tensor& a, std::shared_ptr<const std::vector<Index>> indices, Shape out_shape) {
  const Index m = static_cast<Index>(indices->size());
  if (out_shape.empty()) out_shape = {m};
  if (shape_size(out_shape) != m) {
    throw ShapeError("gather: output shape " + shape_string(out_shape) + " does not hold " + std::to_string(m) +
                     " indices");
  }
  const Index n = a.size();
  Vector v(m);
  for (Index i = 0; i < m; ++i) {
    const Index j = (*indices)[static_cast<std::size_t>(i)];
    if (j < 0 || j >= n) throw ShapeError("gather: index " + std::to_string(j) + " out of range for size " + std::to_string(n));
    v[i] = a.value()[j];
  }
  Tape* tape = tape_of("gather", {a});
  return emit(tape, "gather", {a}, Tensor(std::move(out_shape), std::move(v)), [indices, n, m](const Vector& g) {
    Vector ga = Vector::Zero(n);
    for (Index i = 0; i < m; ++i) ga[(*indices)[static_cast<std::size_t>(i)]] += g[i];
    return std::vector<Vector>{std::move(ga)};
  });
}

Tensor slice(const Tensor& a, Index offset, Shape shape) {
  const Index len = shape_size(shape);
  if (offset < 0 || offset + len > a.size()) {
    throw ShapeError("slice: window [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
                     ") exceeds size " + std::to_string(a.size()));
  }
  Tape* tape = tape_of("slice", {a});
  const Index n = a.size();
  return emit(tape, "slice", {a}, Tensor(std::move(shape), a.value().segment(offset, len)),
              [offset, len, n](const Vector& g) {
                Vector ga = Vector::Zero(n);
                ga.segment(offset, len) = g;
                return std::vector<Vector>{std::move(ga)};
              });
}

Tensor concat(std::span<const Tensor> parts) {
  Index total = 0;
  std::vector<Index> sizes;
  for (const Tensor& p : parts) {
    sizes.push_back(p.size());
    total += p.size();
  }
  Vector v(total);
  Index off = 0;
  for (const Tensor& p : parts) {
    v.segment(off, p.size()) = p.value();
    off += p.size();
  }
  Tape* tape = active_tape(parts, "concat");
  Tensor out(Shape{total}, std::move(v));
  if (!tape) return out;
  return tape->record("concat", parts, std::move(out), [sizes](const Vector& g) {
    std::vector<Vector> gs;
    Index o = 0;
    for (Index s : sizes) {
      gs.emplace_back(g.segment(o, s));
      o += s;
    }
    return gs;
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  Tape* tape = tape_of("reshape", {a});
  return emit(tape, "reshape", {a}, Tensor::from_buffer(std::move(shape), a.buffer()),
              [](const Vector& g) { return std::vector<Vector>{g}; });
}

// ---------------------------------------------------------------------------
// Stencils

Vector Stencil::apply(const Vector& x) const {
  Vector y(rows);
  const Index* idx = indices.data();
  const double* w = weights.data();
  for (Index i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (Index k = 0; k < width; ++k) acc += w[i * width + k] * x[idx[i * width + k]];
    y[i] = acc;
  }
  return y;
}

Vector Stencil::apply_transpose(const Vector& y) const {
  Vector x = Vector::Zero(cols);
  const Index* idx = indices.data();
  const double* w = weights.data();
  for (Index i = 0; i < rows; ++i) {
    for (Index k = 0; k < width; ++k) x[idx[i * width + k]] += w[i * width + k] * y[i];
  }
  return x;
}

Tensor stencil_apply(const Tensor& x, std::shared_ptr<const Stencil> stencil) {
  if (x.size() != stencil->cols) {
    throw ShapeError("stencil_apply: stencil expects " + std::to_string(stencil->cols) + " inputs, got " +
                     shape_string(x.shape()));
  }
  Tape* tape = tape_of("stencil_apply", {x});
  return emit(tape, "stencil_apply", {x}, Tensor(Shape{stencil->rows}, stencil->apply(x.value())),
              [stencil](const Vector& g) { return std::vector<Vector>{stencil->apply_transpose(g)}; });
}

// ---------------------------------------------------------------------------
// Operators

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& a) { return neg(a); }
Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
Tensor operator+(const Tensor& a, double c) { return shift(a, c); }
Tensor operator-(const Tensor& a, double c) { return shift(a, -c); }

}  // namespace imdiff
