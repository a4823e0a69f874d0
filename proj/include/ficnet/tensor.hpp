#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ficnet {

using Shape = std::vector<std::size_t>;
inline constexpr std::size_t kMaxRank = 6;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Incompatible shapes, ranks, or axis arguments.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or Inf was produced, or a guarded division would have blown up.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Graph recording switch, per thread. Recording is on by default.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Tensor;

namespace detail {

template <class T>
struct Node {
  // grad_in[i] is null when parent i does not require a gradient.
  using BackwardFn = std::function<void(const Node& self, std::span<const T> grad_out,
                                        std::span<std::vector<T>* const> grad_in)>;

  Shape shape;
  std::vector<T> value;
  std::vector<std::shared_ptr<const Node>> parents;
  BackwardFn backward;
  bool requires_grad = false;
  const char* op = "leaf";

  const std::vector<T>& parent_value(std::size_t i) const { return parents[i]->value; }
  const Shape& parent_shape(std::size_t i) const { return parents[i]->shape; }
};

}  // namespace detail

/// Dense row-major array with an optional record of the operation that produced it.
///
/// Tensors are immutable after construction and cheap to copy (shared node).
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;
  using BackwardFn = typename Node::BackwardFn;

  /// Rank-0 zero.
  Tensor();
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  /// Result of a differentiable op. Parents and the backward rule are recorded only
  /// when recording is enabled and some parent requires a gradient.
  static Tensor from_op(const char* op, Shape shape, std::vector<T> values,
                        std::vector<Tensor> parents, BackwardFn backward);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return node_->value.size(); }
  std::span<const T> data() const { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  /// Value of a single-element tensor.
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->parents.empty(); }

  /// Leaf with the same values that records gradients; returns *this when it
  /// already is one.
  Tensor requiring_grad() const;
  /// New leaf with the same values and no record.
  Tensor detached() const;

  template <class U>
  Tensor<U> cast() const;

  const Node& node() const { return *node_; }
  const std::shared_ptr<const Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<const Node> node) : node_(std::move(node)) {}
  std::shared_ptr<const Node> node_;
};

/// Gradients of a rank-0 `loss` with respect to each tensor in `wrt`.
///
/// A pure function of the recorded graph: the graph is not modified, so repeated
/// calls return bit-identical results. Tensors in `wrt` that the loss does not
/// depend on get zero gradients.
template <class T>
std::vector<Tensor<T>> gradients(const Tensor<T>& loss, std::span<const Tensor<T>> wrt);

template <class T>
void require_finite(std::span<const T> values, const char* what);

}  // namespace ficnet
