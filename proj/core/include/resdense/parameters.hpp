#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "resdense/tensor.hpp"

namespace resdense {

enum class ParamKind { parameter, buffer };

enum class InitRule { he_uniform, zeros, ones };

template <typename T>
struct ParamEntry {
  std::string name;
  // Owning layer path ("resnet.stem.conv"); freezing works on layers.
  std::string layer;
  Tensor<T> tensor;
  ParamKind kind = ParamKind::parameter;
  InitRule init = InitRule::zeros;
  std::size_t fan_in = 1;
};

// Named tensors in declaration order, which is also forward order.
template <typename T>
class ParameterStore {
 public:
  Tensor<T> declare(std::string name, std::string layer, Shape shape, ParamKind kind,
                    InitRule init, std::size_t fan_in = 1);

  std::span<const ParamEntry<T>> entries() const noexcept { return entries_; }
  std::span<ParamEntry<T>> entries() noexcept { return entries_; }

  const ParamEntry<T>* find(std::string_view name) const;
  Tensor<T> at(std::string_view name) const;

  // Distinct layer paths in declaration order, optionally filtered by prefix.
  std::vector<std::string> layers(std::string_view prefix = {}) const;

  // Number of trainable scalars (buffers excluded).
  std::size_t parameter_count() const;

  // He-uniform (limit sqrt(6 / fan_in)) for weights, constants otherwise;
  // draws happen in declaration order.
  void initialize(std::uint64_t seed);

  void clear_grads();

  // Copies values by name; names, kinds and shapes must match exactly.
  template <typename U>
  void copy_values_from(const ParameterStore<U>& other);

 private:
  std::vector<ParamEntry<T>> entries_;
};

template <typename T>
template <typename U>
void ParameterStore<T>::copy_values_from(const ParameterStore<U>& other) {
  const auto src = other.entries();
  if (src.size() != entries_.size()) {
    throw ShapeError("parameter set has " + std::to_string(src.size()) + " tensors, expected " +
                     std::to_string(entries_.size()));
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto& dst = entries_[i];
    if (src[i].name != dst.name) {
      throw ShapeError("tensor '" + src[i].name + "' found where '" + dst.name + "' was expected");
    }
    if (src[i].tensor.shape() != dst.tensor.shape()) {
      throw ShapeError("tensor '" + dst.name + "' has shape " + shape_to_string(src[i].tensor.shape()) +
                       ", expected " + shape_to_string(dst.tensor.shape()));
    }
    auto out = dst.tensor.mutable_data();
    const auto in = src[i].tensor.data();
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<T>(in[j]);
  }
}

extern template class ParameterStore<float>;
extern template class ParameterStore<double>;

}  // namespace resdense
