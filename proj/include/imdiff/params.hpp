#pragma once

/// \file params.hpp
/// Flat trainable parameter vector partitioned into named segments.

#include "imdiff/tensor.hpp"

#include <string>
#include <vector>

namespace imdiff {

class ParamSet {
 public:
  struct Segment {
    std::string name;
    Index offset = 0;
    Index size = 0;
    bool regularized = true;  ///< counted in the weight-decay term (network weights)
  };

  /// Appends a zero-initialized segment and returns its offset.
  Index add(const std::string& name, Index size, bool regularized = true);

  bool contains(const std::string& name) const;
  const Segment& segment(const std::string& name) const;
  const std::vector<Segment>& segments() const { return segments_; }

  Index size() const { return values_.size(); }
  const Vector& values() const { return values_; }
  Vector& values() { return values_; }
  void set_values(const Vector& v);

  /// Segment \p name of \p flat viewed with \p shape (defaults to 1-D).
  Tensor view(const Tensor& flat, const std::string& name, Shape shape = {}) const;
  Vector get(const std::string& name) const;
  void set(const std::string& name, const Vector& v);

  /// Sum of squares over regularized segments of \p flat.
  Tensor regularizer(const Tensor& flat) const;

  /// Throws std::logic_error unless segments tile [0, size) exactly.
  void check_partition() const;

 private:
  std::vector<Segment> segments_;
  Vector values_;
};

}  // namespace imdiff
