#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "resdense/tensor.hpp"

namespace resdense {

// Central-difference gradient of a tensor-to-scalar function. f is evaluated
// on perturbed copies; x itself is not modified.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<double(const Tensor<T>&)>& f, const Tensor<T>& x,
                           double h) {
  Tensor<T> probe = x.clone();
  probe.set_requires_grad(false);
  std::vector<T> grad(x.numel());
  auto values = probe.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T original = values[i];
    values[i] = static_cast<T>(original + h);
    const double up = f(probe);
    values[i] = static_cast<T>(original - h);
    const double down = f(probe);
    values[i] = original;
    grad[i] = static_cast<T>((up - down) / (2.0 * h));
  }
  return Tensor<T>(x.shape(), std::move(grad));
}

// In-place variant for tensors captured by f (model parameters): perturbs
// x[index] for each requested index, restoring the original value after.
template <typename T>
std::vector<double> finite_diff_grad_at(const std::function<double()>& f, Tensor<T>& x,
                                        std::span<const std::size_t> indices, double h) {
  std::vector<double> grad;
  grad.reserve(indices.size());
  auto values = x.mutable_data();
  for (std::size_t i : indices) {
    const T original = values[i];
    values[i] = static_cast<T>(original + h);
    const double up = f();
    values[i] = static_cast<T>(original - h);
    const double down = f();
    values[i] = original;
    grad.push_back((up - down) / (2.0 * h));
  }
  return grad;
}

// |analytic - numeric| / max(1, |numeric|)
inline double gradient_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

}  // namespace resdense
