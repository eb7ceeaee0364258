#include "resdense/blocks.hpp"

#include <cmath>

namespace resdense {

Conv2dOptions same_padding(std::size_t kernel, std::size_t stride) {
  const std::size_t total = kernel > stride ? kernel - stride : 0;
  Conv2dOptions opts;
  opts.stride = stride;
  opts.padding = total / 2;
  opts.padding_after = total - total / 2;
  return opts;
}

// ---------------------------------------------------------------------------

template <typename T>
ConvLayer<T>::ConvLayer(ParameterStore<T>& store, const std::string& name, std::size_t in_channels,
                        std::size_t out_channels, std::size_t kernel, Conv2dOptions options,
                        bool with_bias)
    : options_(options) {
  const std::size_t fan_in = in_channels * kernel * kernel;
  weight_ = store.declare(name + ".weight", name, {out_channels, in_channels, kernel, kernel},
                          ParamKind::parameter, InitRule::he_uniform, fan_in);
  if (with_bias) {
    bias_ = store.declare(name + ".bias", name, {out_channels}, ParamKind::parameter, InitRule::zeros);
  }
}

template <typename T>
Tensor<T> ConvLayer<T>::forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const {
  return conv2d(x, weight_, bias_, options_, ctx.tape);
}

template <typename T>
BatchNormLayer<T>::BatchNormLayer(ParameterStore<T>& store, const std::string& name,
                                  std::size_t channels) {
  gamma_ = store.declare(name + ".gamma", name, {channels}, ParamKind::parameter, InitRule::ones);
  beta_ = store.declare(name + ".beta", name, {channels}, ParamKind::parameter, InitRule::zeros);
  stats_.running_mean =
      store.declare(name + ".running_mean", name, {channels}, ParamKind::buffer, InitRule::zeros);
  stats_.running_var =
      store.declare(name + ".running_var", name, {channels}, ParamKind::buffer, InitRule::ones);
}

template <typename T>
Tensor<T> BatchNormLayer<T>::forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const {
  BatchNormOptions opts;
  opts.mode = ctx.mode;
  return batch_norm2d(x, gamma_, beta_, &stats_, opts, ctx.tape);
}

// ---------------------------------------------------------------------------

ResidualBlockSpec ResidualBlockSpec::make(std::size_t in, std::size_t out, std::size_t stride,
                                          bool bottleneck) {
  return ResidualBlockSpec{in, out, stride, in != out || stride != 1, bottleneck};
}

template <typename T>
ResidualBlock<T>::ResidualBlock(ParameterStore<T>& store, const std::string& name,
                                ResidualBlockSpec spec)
    : spec_(spec) {
  if ((spec.in_channels != spec.out_channels || spec.stride != 1) && !spec.projection_shortcut) {
    throw ShapeError(name + ": a projection shortcut is required when channels or stride change");
  }
  if (spec.stride != 1 && spec.stride != 2) throw ShapeError(name + ": stride must be 1 or 2");
  const Conv2dOptions keep = same_padding(3, 1);
  const Conv2dOptions entry = same_padding(3, spec.stride);
  if (!spec.bottleneck) {
    convs_.emplace_back(store, name + ".conv1", spec.in_channels, spec.out_channels, 3, entry, false);
    norms_.emplace_back(store, name + ".bn1", spec.out_channels);
    convs_.emplace_back(store, name + ".conv2", spec.out_channels, spec.out_channels, 3, keep, false);
    norms_.emplace_back(store, name + ".bn2", spec.out_channels);
  } else {
    const std::size_t width = std::max<std::size_t>(1, spec.out_channels / 4);
    convs_.emplace_back(store, name + ".conv1", spec.in_channels, width, 1, Conv2dOptions{}, false);
    norms_.emplace_back(store, name + ".bn1", width);
    convs_.emplace_back(store, name + ".conv2", width, width, 3, entry, false);
    norms_.emplace_back(store, name + ".bn2", width);
    convs_.emplace_back(store, name + ".conv3", width, spec.out_channels, 1, Conv2dOptions{}, false);
    norms_.emplace_back(store, name + ".bn3", spec.out_channels);
  }
  if (spec.projection_shortcut) {
    shortcut_conv_.emplace(store, name + ".shortcut.conv", spec.in_channels, spec.out_channels, 1,
                           Conv2dOptions{}, false);
    shortcut_norm_.emplace(store, name + ".shortcut.bn", spec.out_channels);
  }
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const {
  if (x.rank() != 4 || x.dim(1) != spec_.in_channels) {
    throw ShapeError("residual block expects " + std::to_string(spec_.in_channels) +
                     " input channels, got shape " + shape_to_string(x.shape()));
  }
  Tensor<T> branch = x;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    branch = norms_[i].forward(convs_[i].forward(branch, ctx), ctx);
    if (i + 1 < convs_.size()) branch = relu(branch, ctx.tape);
  }
  Tensor<T> shortcut = x;
  if (shortcut_conv_) {
    if (spec_.stride == 2) shortcut = avg_pool2d(shortcut, 2, 2, ctx.tape);
    shortcut = shortcut_norm_->forward(shortcut_conv_->forward(shortcut, ctx), ctx);
  }
  return relu(add(branch, shortcut, ctx.tape), ctx.tape);
}

// ---------------------------------------------------------------------------

template <typename T>
DenseBlock<T>::DenseBlock(ParameterStore<T>& store, const std::string& name, DenseBlockSpec spec)
    : spec_(spec) {
  if (spec.num_layers == 0 || spec.growth_rate == 0 || spec.in_channels == 0) {
    throw ShapeError(name + ": dense block needs positive layers, growth rate and input channels");
  }
  for (std::size_t i = 1; i <= spec.num_layers; ++i) {
    const std::string layer = name + ".layer" + std::to_string(i);
    const std::size_t in = spec.layer_input_channels(i);
    norms_.emplace_back(store, layer + ".bn", in);
    convs_.emplace_back(store, layer + ".conv", in, spec.growth_rate, 3, same_padding(3, 1), false);
  }
}

template <typename T>
Tensor<T> DenseBlock<T>::forward(const Tensor<T>& x, const ForwardContext<T>& ctx,
                                 DenseBlockTrace<T>* trace) const {
  if (x.rank() != 4 || x.dim(1) != spec_.in_channels) {
    throw ShapeError("dense block expects " + std::to_string(spec_.in_channels) +
                     " input channels, got shape " + shape_to_string(x.shape()));
  }
  std::vector<Tensor<T>> features{x};
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    Tensor<T> input = features.size() == 1 ? x : concat_channels<T>(features, ctx.tape);
    Tensor<T> out = convs_[i].forward(relu(norms_[i].forward(input, ctx), ctx.tape), ctx);
    if (trace != nullptr) {
      trace->layer_inputs.push_back(input);
      trace->layer_outputs.push_back(out);
    }
    features.push_back(std::move(out));
  }
  Tensor<T> output = concat_channels<T>(features, ctx.tape);
  if (trace != nullptr) trace->output = output;
  return output;
}

template <typename T>
Transition<T>::Transition(ParameterStore<T>& store, const std::string& name,
                          std::size_t in_channels, std::size_t out_channels)
    : norm_(store, name + ".bn", in_channels),
      conv_(store, name + ".conv", in_channels, out_channels, 1, Conv2dOptions{}, false) {}

template <typename T>
Tensor<T> Transition<T>::forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const {
  return avg_pool2d(conv_.forward(relu(norm_.forward(x, ctx), ctx.tape), ctx), 2, 2, ctx.tape);
}

// ---------------------------------------------------------------------------

std::string to_string(BackboneKind kind) { return kind == BackboneKind::resnet ? "resnet" : "densenet"; }

std::size_t BackboneSpec::downsampling() const {
  std::size_t d = 4;
  if (kind == BackboneKind::resnet) {
    for (const auto& s : stages) d *= s.stride;
  } else {
    for (std::size_t i = 1; i < dense_layers.size(); ++i) d *= 2;
  }
  return d;
}

std::vector<ResidualBlockSpec> BackboneSpec::residual_blocks() const {
  std::vector<ResidualBlockSpec> blocks;
  std::size_t channels = stem_channels;
  for (const auto& stage : stages) {
    for (std::size_t b = 0; b < stage.blocks; ++b) {
      const std::size_t stride = b == 0 ? stage.stride : 1;
      blocks.push_back(ResidualBlockSpec::make(channels, stage.channels, stride, bottleneck));
      channels = stage.channels;
    }
  }
  return blocks;
}

std::vector<DenseBlockSpec> BackboneSpec::dense_blocks() const {
  std::vector<DenseBlockSpec> blocks;
  const auto widths = transition_channels();
  std::size_t channels = stem_channels;
  for (std::size_t i = 0; i < dense_layers.size(); ++i) {
    blocks.push_back(DenseBlockSpec{dense_layers[i], growth_rate, channels});
    if (i < widths.size()) channels = widths[i];
  }
  return blocks;
}

std::vector<std::size_t> BackboneSpec::transition_channels() const {
  std::vector<std::size_t> widths;
  std::size_t channels = stem_channels;
  for (std::size_t i = 0; i < dense_layers.size(); ++i) {
    channels += dense_layers[i] * growth_rate;
    if (i + 1 < dense_layers.size()) {
      channels = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(channels * compression)));
      widths.push_back(channels);
    }
  }
  return widths;
}

std::size_t BackboneSpec::output_channels() const {
  if (kind == BackboneKind::resnet) return stages.empty() ? stem_channels : stages.back().channels;
  const auto blocks = dense_blocks();
  return blocks.empty() ? stem_channels : blocks.back().out_channels();
}

std::vector<std::string> BackboneSpec::validate(const std::string& path) const {
  std::vector<std::string> v;
  if (input_channels == 0) v.push_back(path + ".input_channels: must be positive");
  if (stem_channels == 0) v.push_back(path + ".stem_channels: must be positive");
  if (stem_kernel == 0 || stem_kernel % 2 == 0) v.push_back(path + ".stem_kernel: must be a positive odd integer");
  if (kind == BackboneKind::resnet) {
    if (stages.empty()) v.push_back(path + ".stages: resnet backbone needs at least one stage");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const std::string p = path + ".stages[" + std::to_string(i) + "]";
      if (stages[i].blocks == 0) v.push_back(p + ".blocks: must be positive");
      if (stages[i].channels == 0) v.push_back(p + ".channels: must be positive");
      if (stages[i].stride != 1 && stages[i].stride != 2) v.push_back(p + ".stride: must be 1 or 2");
    }
  } else {
    if (dense_layers.empty()) v.push_back(path + ".dense_layers: densenet backbone needs at least one block");
    for (std::size_t i = 0; i < dense_layers.size(); ++i) {
      if (dense_layers[i] == 0) v.push_back(path + ".dense_layers[" + std::to_string(i) + "]: must be positive");
    }
    if (growth_rate == 0) v.push_back(path + ".growth_rate: must be positive");
    if (!(compression > 0 && compression <= 1)) v.push_back(path + ".compression: must be in (0, 1]");
  }
  return v;
}

BackboneSpec BackboneSpec::mini_resnet() {
  BackboneSpec s;
  s.kind = BackboneKind::resnet;
  s.stem_channels = 16;
  s.stages = {{2, 16, 1}, {2, 32, 2}};
  return s;
}

BackboneSpec BackboneSpec::mini_densenet() {
  BackboneSpec s;
  s.kind = BackboneKind::densenet;
  s.stem_channels = 16;
  s.dense_layers = {4, 4};
  s.growth_rate = 8;
  s.compression = 0.5;
  return s;
}

BackboneSpec BackboneSpec::resnet101() {
  BackboneSpec s;
  s.kind = BackboneKind::resnet;
  s.stem_channels = 64;
  s.stem_kernel = 7;
  s.stages = {{3, 256, 1}, {4, 512, 2}, {23, 1024, 2}, {3, 2048, 2}};
  s.bottleneck = true;
  return s;
}

BackboneSpec BackboneSpec::densenet121() {
  BackboneSpec s;
  s.kind = BackboneKind::densenet;
  s.stem_channels = 64;
  s.stem_kernel = 7;
  s.dense_layers = {6, 12, 24, 16};
  s.growth_rate = 32;
  s.compression = 0.5;
  return s;
}

namespace {

BackboneSpec validated(BackboneSpec spec, const std::string& name) {
  if (auto v = spec.validate(name); !v.empty()) throw ConfigError(std::move(v));
  return spec;
}

}  // namespace

template <typename T>
Backbone<T>::Backbone(ParameterStore<T>& store, const std::string& name, BackboneSpec spec)
    : spec_(validated(std::move(spec), name)),
      stem_conv_(store, name + ".stem.conv", spec_.input_channels, spec_.stem_channels,
                 spec_.stem_kernel, same_padding(spec_.stem_kernel, 2), false),
      stem_norm_(store, name + ".stem.bn", spec_.stem_channels) {
  if (spec_.kind == BackboneKind::resnet) {
    const auto blocks = spec_.residual_blocks();
    std::size_t next = 0;
    for (std::size_t s = 0; s < spec_.stages.size(); ++s) {
      for (std::size_t b = 0; b < spec_.stages[s].blocks; ++b) {
        residual_.emplace_back(store,
                               name + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1),
                               blocks[next++]);
      }
    }
  } else {
    const auto blocks = spec_.dense_blocks();
    const auto widths = spec_.transition_channels();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      dense_.emplace_back(store, name + ".block" + std::to_string(i + 1), blocks[i]);
      if (i < widths.size()) {
        transitions_.emplace_back(store, name + ".transition" + std::to_string(i + 1),
                                  blocks[i].out_channels(), widths[i]);
      }
    }
    final_norm_.emplace(store, name + ".final_bn", spec_.output_channels());
  }
}

template <typename T>
Tensor<T> Backbone<T>::forward(const Tensor<T>& x, const ForwardContext<T>& ctx,
                               std::vector<DenseBlockTrace<T>>* traces) const {
  if (x.rank() != 4 || x.dim(1) != spec_.input_channels) {
    throw ShapeError(to_string(spec_.kind) + " backbone expects N x " +
                     std::to_string(spec_.input_channels) + " x H x W input, got " +
                     shape_to_string(x.shape()));
  }
  const std::size_t d = spec_.downsampling();
  if (x.dim(2) % d != 0 || x.dim(3) % d != 0) {
    throw ShapeError(to_string(spec_.kind) + " backbone: spatial dims of " + shape_to_string(x.shape()) +
                     " are not divisible by the downsampling factor " + std::to_string(d));
  }
  Tensor<T> h = relu(stem_norm_.forward(stem_conv_.forward(x, ctx), ctx), ctx.tape);
  h = max_pool2d(h, 2, 2, ctx.tape);
  if (spec_.kind == BackboneKind::resnet) {
    for (const auto& block : residual_) h = block.forward(h, ctx);
    return h;
  }
  for (std::size_t i = 0; i < dense_.size(); ++i) {
    DenseBlockTrace<T> trace;
    h = dense_[i].forward(h, ctx, traces != nullptr ? &trace : nullptr);
    if (traces != nullptr) traces->push_back(std::move(trace));
    if (i < transitions_.size()) h = transitions_[i].forward(h, ctx);
  }
  return relu(final_norm_->forward(h, ctx), ctx.tape);
}

template class ConvLayer<float>;
template class ConvLayer<double>;
template class BatchNormLayer<float>;
template class BatchNormLayer<double>;
template class ResidualBlock<float>;
template class ResidualBlock<double>;
template class DenseBlock<float>;
template class DenseBlock<double>;
template class Transition<float>;
template class Transition<double>;
template class Backbone<float>;
template class Backbone<double>;

}  // namespace resdense
