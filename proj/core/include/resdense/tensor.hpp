#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "resdense/error.hpp"

namespace resdense {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  // Empty until a backward pass touches this tensor.
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
};

}  // namespace detail

// Dense row-major N-d array. Copies share storage (handle semantics); use
// clone() for a deep copy. Only optimizers, initializers and gradient checks
// write through mutable_data().
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : impl_(std::make_shared<Impl>()) {
    validate_shape(shape);
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<Impl>()) {
    validate_shape(shape);
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_to_string(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  bool defined() const noexcept { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
    }
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool enabled) {
    impl_->requires_grad = enabled;
    return *this;
  }

  bool is_leaf() const { return impl_->is_leaf; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  void clear_grad() { impl_->grad.clear(); }

  Tensor clone() const {
    Tensor out(impl_->shape, impl_->data);
    out.impl_->requires_grad = impl_->requires_grad;
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> values(impl_->data.begin(), impl_->data.end());
    Tensor<U> out(impl_->shape, std::move(values));
    out.set_requires_grad(impl_->requires_grad);
    return out;
  }

  // Identity for tape bookkeeping.
  const void* id() const noexcept { return impl_.get(); }
  const std::shared_ptr<Impl>& handle() const noexcept { return impl_; }

  static Tensor from_handle(std::shared_ptr<Impl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) {
      throw ShapeError("tensor rank must be at least 1");
    }
    for (std::size_t d : shape) {
      if (d == 0) {
        throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
      }
    }
  }

  std::shared_ptr<Impl> impl_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

}  // namespace resdense
