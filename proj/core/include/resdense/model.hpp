#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "resdense/blocks.hpp"

namespace resdense {

enum class PoolingKind { gap, gem };
enum class HeadKind { sigmoid_binary, softmax2 };

std::string to_string(PoolingKind kind);
std::string to_string(HeadKind kind);

struct ModelConfig {
  BackboneSpec resnet = BackboneSpec::mini_resnet();
  BackboneSpec densenet = BackboneSpec::mini_densenet();
  std::size_t fusion_channels = 64;
  PoolingKind pooling = PoolingKind::gap;
  // Shared GeM exponent, used when pooling == gem.
  double gem_p = 3.0;
  HeadKind head = HeadKind::sigmoid_binary;
  std::size_t input_height = 32;
  std::size_t input_width = 32;

  std::vector<std::string> validate() const;
  std::size_t head_outputs() const { return head == HeadKind::sigmoid_binary ? 1 : 2; }
};

template <typename T>
struct BranchFeatures {
  Tensor<T> resnet;
  Tensor<T> densenet;
};

// Dual-backbone network: each backbone feature map is projected to
// fusion_channels by a 1x1 convolution, the projections are added and
// rectified, pooled (GAP or GeM) and classified by an affine head followed by
// sigmoid or softmax. Parameter names start with "resnet.", "densenet.",
// "proj." or "head.".
template <typename T>
class ResDenseModel {
 public:
  // Skeleton with declared but uninitialized (constant-filled) parameters.
  explicit ResDenseModel(ModelConfig config);

  static ResDenseModel build(const ModelConfig& config, std::uint64_t seed);

  ResDenseModel(ResDenseModel&&) noexcept = default;
  ResDenseModel& operator=(ResDenseModel&&) noexcept = default;
  ResDenseModel(const ResDenseModel&) = delete;
  ResDenseModel& operator=(const ResDenseModel&) = delete;

  ResDenseModel clone() const { return cast<T>(); }

  template <typename U>
  ResDenseModel<U> cast() const {
    ResDenseModel<U> out(config_);
    out.parameters().copy_values_from(params_);
    return out;
  }

  // Probabilities, N x 1 (sigmoid head) or N x 2 (softmax head).
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Tape<T>* tape = nullptr) const;

  BranchFeatures<T> features(const Tensor<T>& x, const ForwardContext<T>& ctx,
                             std::vector<DenseBlockTrace<T>>* dense_traces = nullptr) const;

  // add(conv1x1(resnet -> C_f), conv1x1(densenet -> C_f)).
  Tensor<T> fuse(const Tensor<T>& f_res, const Tensor<T>& f_dense, Tape<T>* tape = nullptr) const;

  // Pooled, rectified fusion vector to probabilities.
  Tensor<T> classify(const Tensor<T>& fused, Tape<T>* tape = nullptr) const;

  // Probability of the positive (covid) class for each row of forward().
  std::vector<double> positive_probabilities(const Tensor<T>& probs) const;

  const ModelConfig& config() const noexcept { return config_; }
  ParameterStore<T>& parameters() noexcept { return params_; }
  const ParameterStore<T>& parameters() const noexcept { return params_; }

  const Backbone<T>& resnet() const { return resnet_; }
  const Backbone<T>& densenet() const { return densenet_; }

 private:
  ModelConfig config_;
  ParameterStore<T> params_;
  Backbone<T> resnet_;
  Backbone<T> densenet_;
  ConvLayer<T> proj_resnet_;
  ConvLayer<T> proj_densenet_;
  Tensor<T> head_weight_;
  Tensor<T> head_bias_;
  std::vector<double> gem_exponents_;
};

template <typename T>
Tensor<T> forward_slice(const ResDenseModel<T>& model, const Tensor<T>& x, Mode mode,
                        Tape<T>* tape = nullptr) {
  return model.forward(x, mode, tape);
}

extern template class ResDenseModel<float>;
extern template class ResDenseModel<double>;

}  // namespace resdense
