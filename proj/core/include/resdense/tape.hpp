#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "resdense/tensor.hpp"

namespace resdense {

// Records differentiable operations in execution order so that a single
// reverse sweep can populate gradients. One tape belongs to one thread.
template <typename T>
class Tape {
 public:
  using ImplPtr = std::shared_ptr<detail::TensorImpl<T>>;

  struct Node {
    std::string op;
    std::vector<ImplPtr> inputs;
    ImplPtr output;
    std::function<void()> backward;
  };

  void record(std::string op, std::vector<ImplPtr> inputs, ImplPtr output,
              std::function<void()> backward);

  // Clears every gradient buffer reachable from the tape, seeds d(loss)=1 and
  // runs the recorded backward rules in reverse. Leaves that require grad but
  // are not reached end up with an all-zero gradient. The tape is reset
  // afterwards.
  void backward(const Tensor<T>& loss);

  std::span<const Node> nodes() const noexcept { return nodes_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }
  void reset() noexcept { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

// True when an op on these inputs must be recorded.
template <typename T>
bool should_record(const Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
  if (tape == nullptr) return false;
  for (const auto* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Gradient buffer of a tape-owned tensor, allocated (zeroed) on first use.
template <typename T>
std::span<T> grad_buffer(detail::TensorImpl<T>& impl) {
  if (impl.grad.size() != impl.data.size()) impl.grad.assign(impl.data.size(), T{0});
  return impl.grad;
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace resdense
