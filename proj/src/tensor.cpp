#include "imdiff/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace imdiff {

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : shape_{0}, data_(std::make_shared<const Vector>()) {}

Tensor::Tensor(Vector data)
    : shape_{static_cast<Index>(data.size())}, data_(std::make_shared<const Vector>(std::move(data))) {}

Tensor::Tensor(Shape shape, Vector data) : shape_(std::move(shape)) {
  if (shape_size(shape_) != data.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape_) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  data_ = std::make_shared<const Vector>(std::move(data));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, Vector::Constant(1, value)); }

Tensor Tensor::zeros(Shape shape) {
  const Index n = shape_size(shape);
  return Tensor(std::move(shape), Vector::Zero(n));
}

Tensor Tensor::from_buffer(Shape shape, std::shared_ptr<const Vector> data) {
  if (!data || shape_size(shape) != data->size()) {
    throw ShapeError("tensor: shape " + shape_string(shape) + " does not match buffer");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(data);
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_string(shape_) + " is not a scalar");
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_.reset();
  return t;
}

// ---------------------------------------------------------------------------
// GradMap

Vector GradMap::of(const Tensor& t) const {
  if (t.node()) {
    if (const Vector* g = find(*t.node())) return *g;
  }
  return Vector::Zero(t.size());
}

const Vector* GradMap::find(NodeId id) const {
  auto it = entries_.find(id);
  return it == entries_.end() ? nullptr : &it->second;
}

void GradMap::accumulate(NodeId id, const Vector& cotangent) {
  auto [it, inserted] = entries_.try_emplace(id, cotangent);
  if (!inserted) it->second += cotangent;
}

// ---------------------------------------------------------------------------
// Tape

Tape::~Tape() {
  if (parent_) parent_->adjust(-static_cast<long>(nodes_.size()), -static_cast<long>(own_scalars_));
}

void Tape::adjust(long delta_nodes, long delta_scalars) {
  current_nodes_ = static_cast<std::size_t>(static_cast<long>(current_nodes_) + delta_nodes);
  current_scalars_ = static_cast<std::size_t>(static_cast<long>(current_scalars_) + delta_scalars);
  peak_nodes_ = std::max(peak_nodes_, current_nodes_);
  peak_scalars_ = std::max(peak_scalars_, current_scalars_);
  if (parent_) parent_->adjust(delta_nodes, delta_scalars);
}

void Tape::hold(const std::shared_ptr<const Vector>& buffer) {
  if (!buffer || held_index_.count(buffer.get())) return;
  held_index_.emplace(buffer.get(), held_.size());
  held_.push_back(buffer);
  own_scalars_ += static_cast<std::size_t>(buffer->size());
  adjust(0, static_cast<long>(buffer->size()));
}

TapeStats Tape::stats() const {
  return TapeStats{current_nodes_, current_scalars_, peak_nodes_, peak_scalars_};
}

Tensor Tape::leaf(const Tensor& value) {
  Tensor t = value.detach();
  const NodeId id = nodes_.size();
  nodes_.push_back(Node{"leaf", {}, {}, t.size(), nullptr});
  adjust(1, 0);
  hold(t.buffer());
  t.tape_ = this;
  t.node_ = id;
  return t;
}

Tensor Tape::leaf(Vector value) { return leaf(Tensor(std::move(value))); }

Tensor Tape::record(std::string_view op, std::span<const Tensor> inputs, Tensor output, VjpFn vjp,
                    std::span<const std::shared_ptr<const Vector>> saved) {
  output = output.detach();
  if (!recording()) return output;

  Node node;
  node.op = std::string(op);
  bool any = false;
  for (const Tensor& in : inputs) {
    if (in.tracked() && in.tape() == this) {
      node.inputs.push_back(*in.node());
      node.input_sizes.push_back(in.size());
      any = true;
    } else {
      node.inputs.push_back(static_cast<NodeId>(-1));
      node.input_sizes.push_back(in.size());
    }
  }
  if (!any) return output;

  node.output_size = output.size();
  node.vjp = std::move(vjp);
  const NodeId id = nodes_.size();
  nodes_.push_back(std::move(node));
  adjust(1, 0);
  for (const auto& b : saved) hold(b);
  output.tape_ = this;
  output.node_ = id;
  return output;
}

GradMap Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw TapeError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  }
  return vjp(loss, Vector::Ones(1));
}

GradMap Tape::vjp(const Tensor& output, const Vector& seed) {
  GradMap grads;
  if (!output.tracked()) return grads;
  if (output.tape() != this) throw TapeError("vjp: output is recorded on a different tape");
  if (seed.size() != output.size()) {
    throw TapeError("vjp: seed length " + std::to_string(seed.size()) + " does not match output size " +
                    std::to_string(output.size()));
  }
  constexpr NodeId kNone = static_cast<NodeId>(-1);
  const NodeId top = *output.node();
  std::vector<Vector> cot(top + 1);
  cot[top] = seed;

  for (NodeId id = top + 1; id-- > 0;) {
    if (cot[id].size() == 0) continue;
    const Node& node = nodes_[id];
    if (node.inputs.empty()) {
      grads.accumulate(id, cot[id]);
      cot[id] = Vector();
      continue;
    }
    std::vector<Vector> in_cot = node.vjp(cot[id]);
    if (in_cot.size() != node.inputs.size()) {
      throw TapeError("backward: node '" + node.op + "' returned " + std::to_string(in_cot.size()) +
                      " cotangents for " + std::to_string(node.inputs.size()) + " inputs");
    }
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      if (in_cot[k].size() == 0) continue;
      if (in_cot[k].size() != node.input_sizes[k]) {
        throw TapeError("backward: node '" + node.op + "' returned cotangent of length " +
                        std::to_string(in_cot[k].size()) + " for input " + std::to_string(k) + " of size " +
                        std::to_string(node.input_sizes[k]));
      }
      const NodeId src = node.inputs[k];
      if (src == kNone) continue;
      if (cot[src].size() == 0) {
        cot[src] = std::move(in_cot[k]);
      } else {
        cot[src] += in_cot[k];
      }
    }
    cot[id] = Vector();
  }
  return grads;
}

Tape* active_tape(std::span<const Tensor> inputs, std::string_view op) {
  Tape* tape = nullptr;
  for (const Tensor& in : inputs) {
    if (!in.tracked()) continue;
    if (tape && in.tape() != tape) {
      throw TapeError(std::string(op) + ": inputs are recorded on different tapes");
    }
    tape = in.tape();
  }
  if (tape && !tape->recording()) return nullptr;
  return tape;
}

}  // namespace imdiff
