#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "resdense/gradcheck.hpp"
#include "resdense/blocks.hpp"
#include "resdense/model.hpp"
#include "resdense/ops.hpp"
#include "resdense/parameters.hpp"
#include "resdense/tape.hpp"

namespace resdense::testing {

namespace fs = std::filesystem;

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>(shape, std::move(values));
}

inline std::vector<double> random_weights(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> w(n);
  for (auto& v : w) v = dist(rng);
  return w;
}

// sum(y * w): a scalar whose gradient reaches every element of y with a
// distinct weight (a plain sum would vanish through batch norm).
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& y, const std::vector<double>& w, Tape<T>* tape) {
  std::vector<T> cast(w.begin(), w.end());
  return sum(mul(y, Tensor<T>(y.shape(), std::move(cast)), tape), tape);
}

// Direct quadruple loop conv with symmetric zero padding.
template <typename T>
std::vector<double> naive_conv2d(const Tensor<T>& x, const Tensor<T>& k, const std::vector<double>& bias,
                                 std::size_t stride, std::size_t pad, std::size_t& oh, std::size_t& ow) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  oh = (h + 2 * pad - kh) / stride + 1;
  ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * o * oh * ow, 0.0);
  const auto xd = x.data();
  const auto kd = k.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t f = 0; f < o; ++f)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t col = 0; col < ow; ++col) {
          double acc = bias.empty() ? 0.0 : bias[f];
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long y = static_cast<long>(r * stride + i) - static_cast<long>(pad);
                const long xx = static_cast<long>(col * stride + j) - static_cast<long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
                acc += static_cast<double>(xd[((b * c + ch) * h + y) * w + xx]) *
                       static_cast<double>(kd[((f * c + ch) * kh + i) * kw + j]);
              }
          out[((b * o + f) * oh + r) * ow + col] = acc;
        }
  return out;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, std::mt19937_64& rng) {
  if (count >= n) return all_indices(n);
  std::vector<std::size_t> idx = all_indices(n);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Worst |analytic - fd| / max(1, |fd|) over every element of every input.
// f is called as f(inputs, tape) with inputs of the requested scalar type.
// 64-bit: both sides in double.
template <typename F>
double grad_error_64(F&& f, std::vector<Tensor<double>> inputs, double h = 1e-6) {
  for (auto& t : inputs) t.set_requires_grad(true);
  Tape<double> tape;
  const Tensor<double> loss = f(inputs, &tape);
  tape.backward(loss);
  double worst = 0.0;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const auto idx = all_indices(t.numel());
    const auto fd = finite_diff_grad_at<double>([&] { return f(inputs, static_cast<Tape<double>*>(nullptr)).item(); }, t, idx, h);
    for (std::size_t j = 0; j < idx.size(); ++j) worst = std::max(worst, gradient_error(analytic[j], fd[j]));
  }
  return worst;
}

// 32-bit: float analytic gradients against a double finite-difference oracle
// evaluated on cast copies of the same inputs.
template <typename F>
double grad_error_32(F&& f, std::vector<Tensor<float>> inputs, double h = 1e-6) {
  for (auto& t : inputs) t.set_requires_grad(true);
  Tape<float> tape;
  const Tensor<float> loss = f(inputs, &tape);
  tape.backward(loss);
  std::vector<Tensor<double>> wide;
  for (const auto& t : inputs) wide.push_back(t.template cast<double>());
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto idx = all_indices(inputs[i].numel());
    const auto fd = finite_diff_grad_at<double>([&] { return f(wide, static_cast<Tape<double>*>(nullptr)).item(); }, wide[i], idx, h);
    const auto analytic = inputs[i].grad();
    for (std::size_t j = 0; j < idx.size(); ++j) {
      worst = std::max(worst, gradient_error(static_cast<double>(analytic[j]), fd[j]));
    }
  }
  return worst;
}

// Worst gradient error over sampled coordinates of every trainable tensor in
// store. analytic(tape) builds the loss on store; oracle() recomputes it in
// double on mirror, which receives a copy of store's values first.
template <typename T, typename A, typename O>
double store_grad_error(ParameterStore<T>& store, A&& analytic, ParameterStore<double>& mirror, O&& oracle,
                        std::size_t per_tensor, std::mt19937_64& rng, double h = 1e-6) {
  mirror.copy_values_from(store);
  store.clear_grads();
  Tape<T> tape;
  const Tensor<T> loss = analytic(&tape);
  tape.backward(loss);
  double worst = 0.0;
  auto src = store.entries();
  auto dst = mirror.entries();
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].kind != ParamKind::parameter) continue;
    const auto idx = sample_indices(src[i].tensor.numel(), per_tensor, rng);
    const auto fd = finite_diff_grad_at<double>([&] { return oracle(); }, dst[i].tensor, idx, h);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const double a = src[i].tensor.has_grad() ? static_cast<double>(src[i].tensor.grad()[idx[j]]) : 0.0;
      worst = std::max(worst, gradient_error(a, fd[j]));
    }
  }
  return worst;
}

template <typename T>
void perturb_parameters(ParameterStore<T>& store, std::mt19937_64& rng, double scale = 0.3) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (auto& e : store.entries()) {
    if (e.kind != ParamKind::parameter) continue;
    for (auto& v : e.tensor.mutable_data()) v = static_cast<T>(v + dist(rng));
  }
}

// Gradient error of a module built by make(store), over sampled parameter
// coordinates and every input element. The loss is a random weighted sum of
// the output and the oracle is a double copy of the module.
template <typename T, typename Make>
double module_grad_error(const Make& make, const Shape& input_shape, Mode mode, std::uint64_t seed,
                         std::size_t per_tensor = 8, double h = 1e-6) {
  std::mt19937_64 rng(seed);
  ParameterStore<T> store;
  const auto module = make(store);
  ParameterStore<double> mirror;
  const auto oracle_module = make(mirror);
  store.initialize(seed);
  perturb_parameters(store, rng);
  Tensor<T> x = random_tensor<T>(input_shape, rng);
  Tensor<double> xd = x.template cast<double>();
  const std::size_t out_n = module.forward(x, ForwardContext<T>{mode, nullptr}).numel();
  const auto w = random_weights(out_n, rng);
  x.set_requires_grad(true);
  auto analytic = [&](Tape<T>* tape) { return weighted_sum(module.forward(x, ForwardContext<T>{mode, tape}), w, tape); };
  auto oracle = [&] {
    return weighted_sum<double>(oracle_module.forward(xd, ForwardContext<double>{mode, nullptr}), w, nullptr).item();
  };
  double worst = store_grad_error(store, analytic, mirror, oracle, per_tensor, rng, h);
  const auto idx = all_indices(x.numel());
  const auto fd = finite_diff_grad_at<double>(oracle, xd, idx, h);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    worst = std::max(worst, gradient_error(static_cast<double>(x.grad()[j]), fd[j]));
  }
  return worst;
}

// Same for a full model with a binary cross-entropy loss on label 1.
template <typename T>
double model_grad_error(const ModelConfig& config, std::uint64_t seed, std::size_t per_tensor, Mode mode,
                        double h = 1e-6) {
  std::mt19937_64 rng(seed);
  auto model = ResDenseModel<T>::build(config, seed);
  perturb_parameters(model.parameters(), rng, 0.1);
  auto mirror = model.template cast<double>();
  const Tensor<T> x = random_tensor<T>({1, config.resnet.input_channels, config.input_height, config.input_width}, rng);
  const Tensor<double> xd = x.template cast<double>();
  const std::vector<int> label(1, 1);
  auto loss = [&](const auto& out, auto* tape) {
    using U = typename std::remove_cvref_t<decltype(out)>::value_type;
    if (config.head == HeadKind::sigmoid_binary) return binary_cross_entropy<U>(out, label, tape);
    return categorical_cross_entropy<U>(out, label, tape);
  };
  auto analytic = [&](Tape<T>* tape) { return loss(model.forward(x, mode, tape), tape); };
  auto oracle = [&] { return loss(mirror.forward(xd, mode, nullptr), static_cast<Tape<double>*>(nullptr)).item(); };
  return store_grad_error(model.parameters(), analytic, mirror.parameters(), oracle, per_tensor, rng, h);
}

// Removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("resdense_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace resdense::testing
