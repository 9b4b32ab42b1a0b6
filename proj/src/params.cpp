#include "imdiff/params.hpp"

#include "imdiff/ops.hpp"

#include <algorithm>
#include <stdexcept>

namespace imdiff {

Index ParamSet::add(const std::string& name, Index size, bool regularized) {
  if (contains(name)) throw std::invalid_argument("ParamSet: duplicate segment '" + name + "'");
  if (size <= 0) throw std::invalid_argument("ParamSet: segment '" + name + "' must be non-empty");
  const Index offset = values_.size();
  segments_.push_back({name, offset, size, regularized});
  values_.conservativeResize(offset + size);
  values_.tail(size).setZero();
  return offset;
}

bool ParamSet::contains(const std::string& name) const {
  return std::any_of(segments_.begin(), segments_.end(), [&](const Segment& s) { return s.name == name; });
}

const ParamSet::Segment& ParamSet::segment(const std::string& name) const {
  for (const auto& s : segments_)
    if (s.name == name) return s;
  throw std::out_of_range("ParamSet: no segment '" + name + "'");
}

void ParamSet::set_values(const Vector& v) {
  if (v.size() != values_.size()) {
    throw ShapeError("ParamSet: expected " + std::to_string(values_.size()) + " values, got " +
                     std::to_string(v.size()));
  }
  values_ = v;
}

Tensor ParamSet::view(const Tensor& flat, const std::string& name, Shape shape) const {
  const Segment& s = segment(name);
  if (shape.empty()) shape = {s.size};
  if (shape_size(shape) != s.size) {
    throw ShapeError("ParamSet: segment '" + name + "' has " + std::to_string(s.size) + " entries, cannot view as " +
                     shape_string(shape));
  }
  return slice(flat, s.offset, shape);
}

Vector ParamSet::get(const std::string& name) const {
  const Segment& s = segment(name);
  return values_.segment(s.offset, s.size);
}

void ParamSet::set(const std::string& name, const Vector& v) {
  const Segment& s = segment(name);
  if (v.size() != s.size) throw ShapeError("ParamSet: wrong length for segment '" + name + "'");
  values_.segment(s.offset, s.size) = v;
}

Tensor ParamSet::regularizer(const Tensor& flat) const {
  auto idx = std::make_shared<std::vector<Index>>();
  for (const auto& s : segments_) {
    if (!s.regularized) continue;
    for (Index i = 0; i < s.size; ++i) idx->push_back(s.offset + i);
  }
  if (idx->empty()) return Tensor::scalar(0.0);
  const Index n = static_cast<Index>(idx->size());
  return sum(square(gather(flat, std::move(idx), {n})));
}

void ParamSet::check_partition() const {
  Index next = 0;
  for (const auto& s : segments_) {
    if (s.offset != next) throw std::logic_error("ParamSet: segment '" + s.name + "' is not contiguous");
    next += s.size;
  }
  if (next != values_.size()) throw std::logic_error("ParamSet: segments do not cover the parameter vector");
}

}  // namespace imdiff
