#include "ficnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace ficnet {

namespace {
thread_local bool t_grad_enabled = true;
}  // namespace

bool GradMode::enabled() { return t_grad_enabled; }
void GradMode::set_enabled(bool on) { t_grad_enabled = on; }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
void require_finite(std::span<const T> values, const char* what) {
  // Branch-free scan first; only a failing tensor pays for locating the value.
  bool bad = false;
  for (const T v : values) bad |= !(std::abs(v) <= std::numeric_limits<T>::max());
  if (!bad) return;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream os;
      os << "non-finite value " << values[i] << " at index " << i << " in " << what;
      throw NumericError(os.str());
    }
  }
}

template <class T>
Tensor<T>::Tensor() : Tensor(Shape{}, std::vector<T>{T(0)}) {}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) {
  if (shape.size() > kMaxRank) throw ShapeError("rank " + std::to_string(shape.size()) + " exceeds 6");
  if (numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  require_finite<T>(values, "tensor construction");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node_ = std::move(node);
}

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)));
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <class T>
Tensor<T> Tensor<T>::from_op(const char* op, Shape shape, std::vector<T> values,
                             std::vector<Tensor> parents, BackwardFn backward) {
  if (shape.size() > kMaxRank) throw ShapeError(std::string(op) + ": rank exceeds 6");
  if (numel(shape) != values.size()) {
    throw ShapeError(std::string(op) + ": result shape " + shape_string(shape) +
                     " does not match value count");
  }
  require_finite<T>(values, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  const bool record =
      GradMode::enabled() &&
      std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
  if (record) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node_);
  }
  return Tensor(std::move(node));
}

template <class T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
  return node_->shape[axis];
}

template <class T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

template <class T>
Tensor<T> Tensor<T>::requiring_grad() const {
  if (is_leaf() && requires_grad()) return *this;
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  node->requires_grad = true;
  return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::detached() const {
  if (!requires_grad()) return *this;
  return Tensor(shape(), values());
}

template <class T>
template <class U>
Tensor<U> Tensor<T>::cast() const {
  std::vector<U> out(size());
  for (std::size_t i = 0; i < size(); ++i) out[i] = static_cast<U>(node_->value[i]);
  return Tensor<U>(shape(), std::move(out));
}

template <class T>
std::vector<Tensor<T>> gradients(const Tensor<T>& loss, std::span<const Tensor<T>> wrt) {
  using Node = detail::Node<T>;
  if (loss.size() != 1 || loss.rank() != 0) {
    throw ShapeError("backward requires a rank-0 loss, got " + shape_string(loss.shape()));
  }
  require_finite<T>(loss.data(), "loss");

  // Reverse topological order by iterative post-order DFS.
  std::vector<const Node*> order;
  std::unordered_set<const Node*> seen;
  std::vector<std::pair<const Node*, std::size_t>> stack;
  const Node* root = &loss.node();
  if (root->requires_grad) {
    stack.emplace_back(root, 0);
    seen.insert(root);
  }
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_set<const Node*> keep;
  for (const auto& t : wrt) keep.insert(&t.node());

  std::unordered_map<const Node*, std::vector<T>> grads;
  if (root->requires_grad) grads[root] = std::vector<T>{T(1)};

  std::vector<std::vector<T>*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    if (node->backward) {
      const std::vector<T>& grad_out = found->second;
      require_finite<T>(grad_out, node->op);
      slots.assign(node->parents.size(), nullptr);
      for (std::size_t i = 0; i < node->parents.size(); ++i) {
        const Node* parent = node->parents[i].get();
        if (!parent->requires_grad) continue;
        auto& buffer = grads[parent];
        if (buffer.empty()) buffer.assign(parent->value.size(), T(0));
        slots[i] = &buffer;
      }
      node->backward(*node, grad_out, slots);
    }
    if (!keep.count(node)) grads.erase(node);
  }

  std::vector<Tensor<T>> result;
  result.reserve(wrt.size());
  for (const auto& t : wrt) {
    auto found = grads.find(&t.node());
    if (found == grads.end()) {
      result.push_back(Tensor<T>::zeros(t.shape()));
    } else {
      require_finite<T>(found->second, "gradient");
      result.emplace_back(t.shape(), found->second);
    }
  }
  return result;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<double> Tensor<float>::cast<double>() const;
template Tensor<float> Tensor<double>::cast<float>() const;
template Tensor<float> Tensor<float>::cast<float>() const;
template Tensor<double> Tensor<double>::cast<double>() const;
template std::vector<Tensor<float>> gradients(const Tensor<float>&, std::span<const Tensor<float>>);
template std::vector<Tensor<double>> gradients(const Tensor<double>&, std::span<const Tensor<double>>);
template void require_finite<float>(std::span<const float>, const char*);
template void require_finite<double>(std::span<const double>, const char*);

}  // namespace ficnet
