#include "resdense/model.hpp"

#include <cmath>

namespace resdense {

std::string to_string(PoolingKind kind) { return kind == PoolingKind::gap ? "gap" : "gem"; }

std::string to_string(HeadKind kind) {
  return kind == HeadKind::sigmoid_binary ? "sigmoid_binary" : "softmax2";
}

std::vector<std::string> ModelConfig::validate() const {
  std::vector<std::string> v = resnet.validate("model.resnet");
  auto dv = densenet.validate("model.densenet");
  v.insert(v.end(), dv.begin(), dv.end());
  if (resnet.kind != BackboneKind::resnet) v.push_back("model.resnet.kind: must be resnet");
  if (densenet.kind != BackboneKind::densenet) v.push_back("model.densenet.kind: must be densenet");
  if (resnet.input_channels != densenet.input_channels) {
    v.push_back("model.densenet.input_channels: must equal model.resnet.input_channels");
  }
  if (fusion_channels == 0) v.push_back("model.fusion_channels: must be positive");
  if (!(gem_p > 0) || !std::isfinite(gem_p)) v.push_back("model.gem_p: must be positive and finite");
  if (input_height == 0 || input_width == 0) v.push_back("model.input_size: must be positive");
  if (!v.empty()) return v;

  const std::size_t d_res = resnet.downsampling();
  const std::size_t d_dense = densenet.downsampling();
  if (d_res != d_dense) {
    v.push_back("model: mismatched downsampling factors (resnet " + std::to_string(d_res) +
                ", densenet " + std::to_string(d_dense) + ")");
  } else if (input_height % d_res != 0 || input_width % d_res != 0) {
    v.push_back("model.input_size: " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                " is not divisible by the downsampling factor " + std::to_string(d_res));
  }
  return v;
}

namespace {

ModelConfig validated(ModelConfig config) {
  if (auto v = config.validate(); !v.empty()) throw ConfigError(std::move(v));
  return config;
}

}  // namespace

template <typename T>
ResDenseModel<T>::ResDenseModel(ModelConfig config)
    : config_(validated(std::move(config))),
      resnet_(params_, "resnet", config_.resnet),
      densenet_(params_, "densenet", config_.densenet),
      proj_resnet_(params_, "proj.resnet", config_.resnet.output_channels(), config_.fusion_channels, 1,
                   Conv2dOptions{}, true),
      proj_densenet_(params_, "proj.densenet", config_.densenet.output_channels(),
                     config_.fusion_channels, 1, Conv2dOptions{}, true) {
  const std::size_t k = config_.head_outputs();
  head_weight_ = params_.declare("head.weight", "head", {config_.fusion_channels, k}, ParamKind::parameter,
                                 InitRule::he_uniform, config_.fusion_channels);
  head_bias_ = params_.declare("head.bias", "head", {k}, ParamKind::parameter, InitRule::zeros);
  gem_exponents_ = {config_.gem_p};
}

template <typename T>
ResDenseModel<T> ResDenseModel<T>::build(const ModelConfig& config, std::uint64_t seed) {
  ResDenseModel model(config);
  model.params_.initialize(seed);
  return model;
}

template <typename T>
BranchFeatures<T> ResDenseModel<T>::features(const Tensor<T>& x, const ForwardContext<T>& ctx,
                                             std::vector<DenseBlockTrace<T>>* dense_traces) const {
  if (x.rank() != 4 || x.dim(2) != config_.input_height || x.dim(3) != config_.input_width) {
    throw ShapeError("model expects N x " + std::to_string(config_.resnet.input_channels) + " x " +
                     std::to_string(config_.input_height) + " x " + std::to_string(config_.input_width) +
                     " input, got " + shape_to_string(x.shape()));
  }
  return {resnet_.forward(x, ctx), densenet_.forward(x, ctx, dense_traces)};
}

template <typename T>
Tensor<T> ResDenseModel<T>::fuse(const Tensor<T>& f_res, const Tensor<T>& f_dense, Tape<T>* tape) const {
  if (f_res.rank() != 4 || f_dense.rank() != 4 || f_res.dim(0) != f_dense.dim(0) ||
      f_res.dim(2) != f_dense.dim(2) || f_res.dim(3) != f_dense.dim(3)) {
    throw ShapeError("fuse: branch feature maps " + shape_to_string(f_res.shape()) + " and " +
                     shape_to_string(f_dense.shape()) + " differ in batch or spatial dims");
  }
  const ForwardContext<T> ctx{Mode::infer, tape};
  return add(proj_resnet_.forward(f_res, ctx), proj_densenet_.forward(f_dense, ctx), tape);
}

template <typename T>
Tensor<T> ResDenseModel<T>::classify(const Tensor<T>& fused, Tape<T>* tape) const {
  const Tensor<T> rectified = relu(fused, tape);
  const Tensor<T> pooled = config_.pooling == PoolingKind::gap
                               ? global_avg_pool(rectified, tape)
                               : gem_pool(rectified, std::span<const double>(gem_exponents_), tape);
  const Tensor<T> logits = affine(pooled, head_weight_, head_bias_, tape);
  return config_.head == HeadKind::sigmoid_binary ? sigmoid(logits, tape) : softmax(logits, tape);
}

template <typename T>
Tensor<T> ResDenseModel<T>::forward(const Tensor<T>& x, Mode mode, Tape<T>* tape) const {
  const ForwardContext<T> ctx{mode, tape};
  const auto f = features(x, ctx);
  return classify(fuse(f.resnet, f.densenet, tape), tape);
}

template <typename T>
std::vector<double> ResDenseModel<T>::positive_probabilities(const Tensor<T>& probs) const {
  const std::size_t k = config_.head_outputs();
  if (probs.rank() != 2 || probs.dim(1) != k) {
    throw ShapeError("expected N x " + std::to_string(k) + " probabilities, got " +
                     shape_to_string(probs.shape()));
  }
  std::vector<double> out(probs.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = probs.data()[i * k + (k - 1)];
  return out;
}

template class ResDenseModel<float>;
template class ResDenseModel<double>;

}  // namespace resdense
