#pragma once

#include <optional>
#include <string>
#include <vector>

#include "resdense/ops.hpp"
#include "resdense/parameters.hpp"

namespace resdense {

template <typename T>
struct ForwardContext {
  Mode mode = Mode::infer;
  Tape<T>* tape = nullptr;
};

// Top/left and bottom/right padding that makes a k x k kernel at the given
// stride map an extent divisible by the stride to extent / stride.
Conv2dOptions same_padding(std::size_t kernel, std::size_t stride);

template <typename T>
class ConvLayer {
 public:
  ConvLayer() = default;
  ConvLayer(ParameterStore<T>& store, const std::string& name, std::size_t in_channels,
            std::size_t out_channels, std::size_t kernel, Conv2dOptions options, bool with_bias);

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const;

  const Tensor<T>& weight() const { return weight_; }

 private:
  Tensor<T> weight_;
  std::optional<Tensor<T>> bias_;
  Conv2dOptions options_;
};

template <typename T>
class BatchNormLayer {
 public:
  BatchNormLayer() = default;
  BatchNormLayer(ParameterStore<T>& store, const std::string& name, std::size_t channels);

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const;

 private:
  Tensor<T> gamma_;
  Tensor<T> beta_;
  // Written through in train mode.
  mutable BatchNormStats<T> stats_;
};

// ---------------------------------------------------------------------------
// Residual blocks

struct ResidualBlockSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
  bool projection_shortcut = false;
  bool bottleneck = false;

  // Spec with projection_shortcut set exactly when it is required.
  static ResidualBlockSpec make(std::size_t in, std::size_t out, std::size_t stride,
                                bool bottleneck = false);
};

// out = ReLU(F(x) + shortcut(x)), F = conv-BN-ReLU-conv-BN (basic) or the
// 1x1-3x3-1x1 bottleneck. A stride-2 projection shortcut average-pools
// before its 1x1 convolution so even extents halve exactly.
template <typename T>
class ResidualBlock {
 public:
  ResidualBlock(ParameterStore<T>& store, const std::string& name, ResidualBlockSpec spec);

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const;

  const ResidualBlockSpec& spec() const { return spec_; }

 private:
  ResidualBlockSpec spec_;
  std::vector<ConvLayer<T>> convs_;
  std::vector<BatchNormLayer<T>> norms_;
  std::optional<ConvLayer<T>> shortcut_conv_;
  std::optional<BatchNormLayer<T>> shortcut_norm_;
};

// ---------------------------------------------------------------------------
// Dense blocks

struct DenseBlockSpec {
  std::size_t num_layers = 1;
  std::size_t growth_rate = 1;
  std::size_t in_channels = 1;

  std::size_t out_channels() const { return in_channels + num_layers * growth_rate; }
  // Channels consumed by layer i, 1-indexed.
  std::size_t layer_input_channels(std::size_t i) const { return in_channels + (i - 1) * growth_rate; }
};

// What a dense block fed into each layer and produced, for graph inspection.
template <typename T>
struct DenseBlockTrace {
  std::vector<Tensor<T>> layer_inputs;
  std::vector<Tensor<T>> layer_outputs;
  Tensor<T> output;
};

// Layer internals: BN -> ReLU -> conv3x3 producing growth_rate channels.
template <typename T>
class DenseBlock {
 public:
  DenseBlock(ParameterStore<T>& store, const std::string& name, DenseBlockSpec spec);

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext<T>& ctx,
                    DenseBlockTrace<T>* trace = nullptr) const;

  const DenseBlockSpec& spec() const { return spec_; }

 private:
  DenseBlockSpec spec_;
  std::vector<BatchNormLayer<T>> norms_;
  std::vector<ConvLayer<T>> convs_;
};

// BN -> ReLU -> conv1x1 -> 2x2 average pool, stride 2.
template <typename T>
class Transition {
 public:
  Transition(ParameterStore<T>& store, const std::string& name, std::size_t in_channels,
             std::size_t out_channels);

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const;

 private:
  BatchNormLayer<T> norm_;
  ConvLayer<T> conv_;
};

// ---------------------------------------------------------------------------
// Backbones

enum class BackboneKind { resnet, densenet };

struct ResNetStage {
  std::size_t blocks = 1;
  std::size_t channels = 16;
  std::size_t stride = 1;
};

// Both kinds share a stem: conv(k x k, stride 2) -> BN -> ReLU -> 2x2 max
// pool, for a stem downsampling of 4.
struct BackboneSpec {
  BackboneKind kind = BackboneKind::resnet;
  std::size_t input_channels = 3;
  std::size_t stem_channels = 16;
  std::size_t stem_kernel = 3;

  // resnet
  std::vector<ResNetStage> stages;
  bool bottleneck = false;

  // densenet
  std::vector<std::size_t> dense_layers;
  std::size_t growth_rate = 8;
  double compression = 0.5;

  std::size_t downsampling() const;
  std::size_t output_channels() const;
  std::vector<ResidualBlockSpec> residual_blocks() const;
  // Per dense block specs, with transition output widths between them.
  std::vector<DenseBlockSpec> dense_blocks() const;
  std::vector<std::size_t> transition_channels() const;

  // Violations, each prefixed with path.
  std::vector<std::string> validate(const std::string& path) const;

  static BackboneSpec mini_resnet();
  static BackboneSpec mini_densenet();
  static BackboneSpec resnet101();
  static BackboneSpec densenet121();
};

std::string to_string(BackboneKind kind);

template <typename T>
class Backbone {
 public:
  Backbone(ParameterStore<T>& store, const std::string& name, BackboneSpec spec);

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext<T>& ctx,
                    std::vector<DenseBlockTrace<T>>* traces = nullptr) const;

  const BackboneSpec& spec() const { return spec_; }

 private:
  BackboneSpec spec_;
  ConvLayer<T> stem_conv_;
  BatchNormLayer<T> stem_norm_;
  std::vector<ResidualBlock<T>> residual_;
  std::vector<DenseBlock<T>> dense_;
  std::vector<Transition<T>> transitions_;
  std::optional<BatchNormLayer<T>> final_norm_;
};

extern template class ConvLayer<float>;
extern template class ConvLayer<double>;
extern template class BatchNormLayer<float>;
extern template class BatchNormLayer<double>;
extern template class ResidualBlock<float>;
extern template class ResidualBlock<double>;
extern template class DenseBlock<float>;
extern template class DenseBlock<double>;
extern template class Transition<float>;
extern template class Transition<double>;
extern template class Backbone<float>;
extern template class Backbone<double>;

}  // namespace resdense
