#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "geoseg/error.hpp"

namespace geoseg {

// Test builds and the default build compute in 64-bit so that
// finite-difference checks are meaningful.
#ifdef GEOSEG_SINGLE_PRECISION
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major value array.
struct Tensor {
  Shape shape;
  std::vector<Scalar> data;

  Tensor() = default;
  explicit Tensor(Shape s, Scalar fill = 0)
      : shape(std::move(s)), data(element_count(shape), fill) {}
  Tensor(Shape s, std::vector<Scalar> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != element_count(shape))
      fail(ErrorKind::shape, "tensor data size " + std::to_string(data.size()) +
                                 " does not match shape " + shape_string(shape));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }

  Scalar& operator[](std::size_t i) { return data[i]; }
  Scalar operator[](std::size_t i) const { return data[i]; }

  // Indexing for the common [C,H,W] layout.
  Scalar& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * shape[1] + y) * shape[2] + x];
  }
  Scalar at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * shape[1] + y) * shape[2] + x];
  }

  bool all_finite() const {
    for (Scalar v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(Scalar v) { std::fill(data.begin(), data.end(), v); }
};

class Tape;

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first use
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0 for leaves
  std::function<void(const Tensor&)> backward;

  bool has_grad() const { return grad.shape == value.shape && grad.size() == value.size(); }
  Tensor& ensure_grad() {
    if (!has_grad()) grad = Tensor(value.shape);
    return grad;
  }
};

inline std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

// A value in the differentiable graph. Copies share the same node.
class DiffTensor {
 public:
  DiffTensor() = default;

  static DiffTensor constant(Tensor value) {
    return DiffTensor(std::make_shared<detail::Node>(detail::Node{std::move(value), {}, false, 0, {}}));
  }

  // Learnable leaf; the gradient buffer is allocated eagerly.
  static DiffTensor parameter(Tensor value) {
    auto node = std::make_shared<detail::Node>(detail::Node{std::move(value), {}, true, 0, {}});
    node->ensure_grad();
    return DiffTensor(std::move(node));
  }

  bool valid() const { return node_ != nullptr; }
  // Handle semantics: constness of the handle does not propagate to the node.
  Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  Tensor& grad() const { return node_->ensure_grad(); }
  void zero_grad() const { node_->ensure_grad().fill(0); }

  Scalar item() const {
    if (size() != 1) fail(ErrorKind::shape, "item() on non-scalar " + shape_string(shape()));
    return node_->value.data[0];
  }

  detail::Node* node() const { return node_.get(); }

 private:
  friend class Tape;
  explicit DiffTensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Records operations for reverse-mode differentiation. A tape is rebuilt
// for every forward pass and consumed by backward().
class Tape {
 public:
  // Backward callback: receives the output gradient and accumulates into the
  // inputs it captured.
  using BackwardFn = std::function<void(const Tensor&)>;

  Tape() : id_(detail::next_tape_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // With recording off, ops produce constants and nothing is kept.
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  DiffTensor record(std::string_view op, Tensor value, const std::vector<DiffTensor>& inputs,
                    BackwardFn backward) {
    if (!value.all_finite())
      fail(ErrorKind::numeric, std::string(op) + " produced a non-finite value");
    bool needs = false;
    if (recording_)
      for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return DiffTensor::constant(std::move(value));
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->tape_id = id_;
    node->backward = std::move(backward);
    nodes_.push_back(node);
    return DiffTensor(std::move(node));
  }

  void backward(const DiffTensor& loss) {
    if (!loss.valid() || loss.node()->tape_id != id_ || nodes_.empty())
      fail(ErrorKind::state, "backward called on a value that was not recorded on this tape");
    if (loss.size() != 1) fail(ErrorKind::shape, "backward requires a scalar output");
    std::size_t end = nodes_.size();
    while (end > 0 && nodes_[end - 1].get() != loss.node()) --end;
    if (end == 0) fail(ErrorKind::state, "loss node is no longer on the tape");
    loss.node()->ensure_grad().data[0] += 1;
    for (std::size_t i = end; i-- > 0;) {
      auto& node = *nodes_[i];
      if (node.has_grad() && node.backward) node.backward(node.grad);
      node.backward = nullptr;
    }
    clear();
  }

  void clear() { nodes_.clear(); }

 private:
  std::uint64_t id_;
  bool recording_ = true;
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

}  // namespace geoseg
