#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ficnet/rng.hpp"
#include "ficnet/tensor.hpp"

namespace ficnet {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool requires_grad = true;
};

template <class T>
using GradMap = std::map<std::string, Tensor<T>>;

/// Named trainable tensors. Names are unique and a parameter's shape is fixed at
/// creation.
template <class T>
class ParameterSet {
 public:
  const Tensor<T>& add(std::string name, const Tensor<T>& value, bool requires_grad = true);
  /// Replaces the value of an existing parameter; the shape must not change.
  void assign(std::string_view name, const Tensor<T>& value);

  bool contains(std::string_view name) const { return find(name) != nullptr; }
  const Tensor<T>& get(std::string_view name) const;
  const std::vector<Parameter<T>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t element_count() const;

  /// params - lr * grads for every parameter present in `grads`.
  void sgd_step(const GradMap<T>& grads, T lr);

 private:
  const Parameter<T>* find(std::string_view name) const;
  std::vector<Parameter<T>> items_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Gradient of `loss` for every requires_grad parameter. Parameters the loss does
/// not reach get zero tensors.
template <class T>
GradMap<T> backward(const Tensor<T>& loss, const ParameterSet<T>& params);

/// Kaiming-uniform draw with bound sqrt(6 / fan_in).
template <class T>
Tensor<T> kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng);

}  // namespace ficnet
