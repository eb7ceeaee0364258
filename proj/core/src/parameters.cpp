#include "resdense/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace resdense {

template <typename T>
Tensor<T> ParameterStore<T>::declare(std::string name, std::string layer, Shape shape,
                                     ParamKind kind, InitRule init, std::size_t fan_in) {
  if (find(name) != nullptr) throw Error("duplicate parameter name '" + name + "'");
  Tensor<T> tensor(std::move(shape), init == InitRule::ones ? T{1} : T{0});
  tensor.set_requires_grad(kind == ParamKind::parameter);
  entries_.push_back(ParamEntry<T>{std::move(name), std::move(layer), tensor, kind, init, fan_in});
  return tensor;
}

template <typename T>
const ParamEntry<T>* ParameterStore<T>::find(std::string_view name) const {
  const auto it = std::find_if(entries_.begin(), entries_.end(),
                               [&](const ParamEntry<T>& e) { return e.name == name; });
  return it == entries_.end() ? nullptr : &*it;
}

template <typename T>
Tensor<T> ParameterStore<T>::at(std::string_view name) const {
  const auto* entry = find(name);
  if (entry == nullptr) throw Error("unknown parameter '" + std::string(name) + "'");
  return entry->tensor;
}

template <typename T>
std::vector<std::string> ParameterStore<T>::layers(std::string_view prefix) const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    if (!e.layer.starts_with(prefix)) continue;
    if (std::find(out.begin(), out.end(), e.layer) == out.end()) out.push_back(e.layer);
  }
  return out;
}

template <typename T>
std::size_t ParameterStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.kind == ParamKind::parameter) n += e.tensor.numel();
  }
  return n;
}

template <typename T>
void ParameterStore<T>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& e : entries_) {
    auto values = e.tensor.mutable_data();
    switch (e.init) {
      case InitRule::zeros:
        std::fill(values.begin(), values.end(), T{0});
        break;
      case InitRule::ones:
        std::fill(values.begin(), values.end(), T{1});
        break;
      case InitRule::he_uniform: {
        const double limit = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(e.fan_in, 1)));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (auto& v : values) v = static_cast<T>(dist(rng));
        break;
      }
    }
  }
}

template <typename T>
void ParameterStore<T>::clear_grads() {
  for (auto& e : entries_) e.tensor.clear_grad();
}

template class ParameterStore<float>;
template class ParameterStore<double>;

}  // namespace resdense
