#pragma once

#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "resdense/tape.hpp"
#include "resdense/tensor.hpp"

namespace resdense {

// Non-deduced parameter types, so nullptr and std::nullopt arguments work
// without naming T.
template <typename T>
using TapePtr = std::type_identity_t<Tape<T>>*;
template <typename T>
using OptionalTensor = std::type_identity_t<std::optional<Tensor<T>>>;

enum class Mode { train, infer };

enum class Activation { relu, sigmoid };

// padding applies to top/left; padding_after (defaults to padding) to
// bottom/right. Asymmetric padding lets a stride-2 3x3 kernel halve an even
// extent exactly.
struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::optional<std::size_t> padding_after;

  std::size_t trailing() const { return padding_after.value_or(padding); }
};

// Cross-correlation with zero padding. input NCHW, kernel OIKhKw, bias O.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const OptionalTensor<T>& bias, Conv2dOptions options,
                 TapePtr<T> tape = nullptr);

// Running statistics are updated in place in train mode.
template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

template <typename T>
using StatsPtr = std::type_identity_t<BatchNormStats<T>>*;

struct BatchNormOptions {
  Mode mode = Mode::train;
  double momentum = 0.9;
  double epsilon = 1e-5;
};

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                       StatsPtr<T> stats, BatchNormOptions options,
                       TapePtr<T> tape = nullptr);

template <typename T>
Tensor<T> activation(const Tensor<T>& input, Activation kind, TapePtr<T> tape = nullptr);

template <typename T>
Tensor<T> relu(const Tensor<T>& input, TapePtr<T> tape = nullptr) {
  return activation(input, Activation::relu, tape);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input, TapePtr<T> tape = nullptr) {
  return activation(input, Activation::sigmoid, tape);
}

// Row-wise softmax over the last axis of an N x K tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& input, TapePtr<T> tape = nullptr);

// Shift inside x^p so that ln(0) never occurs.
inline constexpr double kGemEpsilon = 1e-6;

// Generalized mean over each feature map: ((1/|X|) sum x^p)^(1/p).
// exponents holds one value (shared) or one per channel. p == 1 takes the
// exact arithmetic-mean path.
template <typename T>
Tensor<T> gem_pool(const Tensor<T>& input, std::span<const double> exponents,
                   TapePtr<T> tape = nullptr);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input, TapePtr<T> tape = nullptr);

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::size_t kernel, std::size_t stride,
                     TapePtr<T> tape = nullptr);

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, std::size_t kernel, std::size_t stride,
                     TapePtr<T> tape = nullptr);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, TapePtr<T> tape = nullptr);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, TapePtr<T> tape = nullptr);

// Sum of all elements as a shape-{1} tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& input, TapePtr<T> tape = nullptr);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs, TapePtr<T> tape = nullptr);

// input N x F, weight F x K, bias K.
template <typename T>
Tensor<T> affine(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 TapePtr<T> tape = nullptr);

inline constexpr double kProbabilityClip = 1e-7;

// Batch-mean binary cross-entropy. probs has N elements (N or N x 1).
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& probs, std::span<const int> labels,
                               TapePtr<T> tape = nullptr);

// Batch-mean -ln p[label] over an N x K probability matrix.
template <typename T>
Tensor<T> categorical_cross_entropy(const Tensor<T>& probs, std::span<const int> labels,
                                    TapePtr<T> tape = nullptr);

}  // namespace resdense
