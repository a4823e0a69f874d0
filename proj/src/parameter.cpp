#include "ficnet/parameter.hpp"

#include <cmath>
#include <stdexcept>

namespace ficnet {

template <class T>
const Tensor<T>& ParameterSet<T>::add(std::string name, const Tensor<T>& value, bool requires_grad) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
  index_.emplace(name, items_.size());
  Tensor<T> leaf = requires_grad ? value.requiring_grad() : value.detached();
  items_.push_back(Parameter<T>{std::move(name), std::move(leaf), requires_grad});
  return items_.back().value;
}

template <class T>
void ParameterSet<T>::assign(std::string_view name, const Tensor<T>& value) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + std::string(name));
  auto& p = items_[it->second];
  if (p.value.shape() != value.shape()) {
    throw ShapeError("parameter " + p.name + " has shape " + shape_string(p.value.shape()) +
                     ", cannot assign " + shape_string(value.shape()));
  }
  p.value = p.requires_grad ? value.requiring_grad() : value.detached();
}

template <class T>
const Parameter<T>* ParameterSet<T>::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &items_[it->second];
}

template <class T>
const Tensor<T>& ParameterSet<T>::get(std::string_view name) const {
  const auto* p = find(name);
  if (!p) throw std::out_of_range("unknown parameter " + std::string(name));
  return p->value;
}

template <class T>
std::size_t ParameterSet<T>::element_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.value.size();
  return n;
}

template <class T>
void ParameterSet<T>::sgd_step(const GradMap<T>& grads, T lr) {
  for (auto& p : items_) {
    auto it = grads.find(p.name);
    if (it == grads.end() || !p.requires_grad) continue;
    std::vector<T> v = p.value.values();
    const auto& g = it->second.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    p.value = Tensor<T>(p.value.shape(), std::move(v)).requiring_grad();
  }
}

template <class T>
GradMap<T> backward(const Tensor<T>& loss, const ParameterSet<T>& params) {
  std::vector<Tensor<T>> leaves;
  std::vector<std::string> names;
  for (const auto& p : params.items()) {
    if (!p.requires_grad) continue;
    leaves.push_back(p.value);
    names.push_back(p.name);
  }
  auto grads = gradients<T>(loss, leaves);
  GradMap<T> out;
  for (std::size_t i = 0; i < names.size(); ++i) out.emplace(names[i], std::move(grads[i]));
  return out;
}

template <class T>
Tensor<T> kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / double(std::max<std::size_t>(fan_in, 1)));
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(shape, std::move(v));
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template GradMap<float> backward(const Tensor<float>&, const ParameterSet<float>&);
template GradMap<double> backward(const Tensor<double>&, const ParameterSet<double>&);
template Tensor<float> kaiming_uniform<float>(const Shape&, std::size_t, Rng&);
template Tensor<double> kaiming_uniform<double>(const Shape&, std::size_t, Rng&);

}  // namespace ficnet
