#pragma once

/// \file tensor.hpp
/// Dense tensors and the explicit reverse-mode tape that records them.
///
/// A Tensor is an immutable, shared dense buffer of doubles with a shape.  When
/// it was produced by an operation recorded on a live Tape it also carries a
/// node id; such a tensor is "tracked" and receives cotangents on backward.
/// Tensors without a node are constants.

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace imdiff {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Shape = std::vector<Index>;
using NodeId = std::size_t;

/// Raised when operand shapes are inconsistent for an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by the tape for misuse (wrong tape, non-scalar loss, bad custom VJP).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised by solvers and rollouts when a numerical procedure fails.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Index shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tape;

class Tensor {
 public:
  Tensor();
  explicit Tensor(Vector data);
  Tensor(Shape shape, Vector data);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape);
  /// Wraps an existing buffer without copying.
  static Tensor from_buffer(Shape shape, std::shared_ptr<const Vector> data);

  const Shape& shape() const { return shape_; }
  Index size() const { return static_cast<Index>(data_->size()); }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  const Vector& value() const { return *data_; }
  double operator[](Index i) const { return (*data_)[i]; }
  double item() const;

  Tape* tape() const { return tape_; }
  std::optional<NodeId> node() const { return node_; }
  bool tracked() const { return node_.has_value(); }

  /// Same value with no tape attachment.
  Tensor detach() const;

  const std::shared_ptr<const Vector>& buffer() const { return data_; }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const Vector> data_;
  Tape* tape_ = nullptr;
  std::optional<NodeId> node_;
};

/// Accumulated cotangents of the leaves reached by a backward sweep.
class GradMap {
 public:
  GradMap() = default;

  bool contains(NodeId id) const { return entries_.count(id) != 0; }
  bool contains(const Tensor& t) const { return t.node() && contains(*t.node()); }

  /// Cotangent of \p t; zeros when \p t was not reached or is a constant.
  Vector of(const Tensor& t) const;
  const Vector* find(NodeId id) const;

  void accumulate(NodeId id, const Vector& cotangent);
  std::size_t size() const { return entries_.size(); }

 private:
  std::unordered_map<NodeId, Vector> entries_;
};

/// Cotangent callback: receives the output cotangent and returns one
/// cotangent per input, in input order.  An empty Vector means "no
/// contribution" for that input.
using VjpFn = std::function<std::vector<Vector>(const Vector& out_cotangent)>;

struct TapeStats {
  std::size_t nodes = 0;
  std::size_t stored_scalars = 0;
  std::size_t peak_nodes = 0;
  std::size_t peak_stored_scalars = 0;
};

/// Append-only record of differentiable operations.
///
/// Node ids are dense integers in creation order, so the node list is a
/// topological order by construction.  Memory accounting counts every
/// distinct buffer a node keeps alive for its VJP exactly once; a child tape
/// (used for recomputation during backward) reports its usage into the
/// parent's peak.
class Tape {
 public:
  Tape() = default;
  explicit Tape(Tape* parent) : parent_(parent) {}
  ~Tape();

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Creates a tracked leaf holding \p value.
  Tensor leaf(const Tensor& value);
  Tensor leaf(Vector value);

  /// Appends a node producing \p output from \p inputs.  Returns \p output
  /// unchanged (a constant) when recording is paused or no input is tracked.
  /// \p saved lists the buffers the VJP closure keeps alive.
  Tensor record(std::string_view op, std::span<const Tensor> inputs, Tensor output, VjpFn vjp,
                std::span<const std::shared_ptr<const Vector>> saved = {});

  bool recording() const { return pause_depth_ == 0; }

  /// Reverse sweep seeded with 1.0 on a scalar \p loss.
  GradMap backward(const Tensor& loss);
  /// Reverse sweep seeded with an arbitrary cotangent of \p output's shape.
  /// The tape is not consumed: repeated sweeps are allowed.
  GradMap vjp(const Tensor& output, const Vector& seed);

  std::size_t node_count() const { return nodes_.size(); }
  TapeStats stats() const;
  std::string_view op_name(NodeId id) const { return nodes_.at(id).op; }

  /// RAII guard suspending recording on a tape.
  class Pause {
   public:
    explicit Pause(Tape& tape) : tape_(&tape) { ++tape_->pause_depth_; }
    ~Pause() { --tape_->pause_depth_; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* tape_;
  };

 private:
  struct Node {
    std::string op;
    std::vector<NodeId> inputs;
    std::vector<Index> input_sizes;
    Index output_size = 0;
    VjpFn vjp;
  };

  void hold(const std::shared_ptr<const Vector>& buffer);
  void adjust(long delta_nodes, long delta_scalars);

  std::vector<Node> nodes_;
  std::vector<std::shared_ptr<const Vector>> held_;
  std::unordered_map<const Vector*, std::size_t> held_index_;
  Tape* parent_ = nullptr;
  int pause_depth_ = 0;
  std::size_t own_scalars_ = 0;
  // Own usage plus live child tapes.
  std::size_t current_nodes_ = 0;
  std::size_t current_scalars_ = 0;
  std::size_t peak_nodes_ = 0;
  std::size_t peak_scalars_ = 0;
};

/// Locates the tape recording an operation over \p inputs, or nullptr when
/// the result is a constant.  Throws TapeError when tracked inputs live on
/// different tapes.
Tape* active_tape(std::span<const Tensor> inputs, std::string_view op);

}  // namespace imdiff
