#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vitfl {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

// One value in the recorded computation graph. Interior nodes own a closure
// that propagates their gradient into their parents.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient is first written
  bool requires_grad = false;
  bool released = false;  // backward already ran through this node
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor with reverse-mode differentiation.
///
/// A Tensor is a cheap handle; copies share the underlying storage. Leaf
/// tensors created with requires_grad=true accumulate gradients across
/// backward passes until zero_grad() is called. Every operation checks its
/// output for NaN/Inf and throws NumericError instead of propagating them.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Writes bypass the graph; intended for parameter updates and loading.
  std::span<double> mutable_data() { return node_->value; }

  // Empty span when no gradient has been written.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad();

  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Runs reverse accumulation from this scalar. Gradients are added to the
  /// grad buffers of every reachable leaf that requires grad. The recorded
  /// graph is released afterwards; a second call throws.
  void backward();

  /// Value copy with no graph history.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace detail {

void check_finite(std::span<const double> values, const char* op);

// Builds the output node of an operation. The closure is only kept when
// recording is enabled and some parent requires grad.
Tensor make_result(Shape shape, std::vector<double> value, const char* op,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> backward_fn);

}  // namespace detail

}  // namespace vitfl
