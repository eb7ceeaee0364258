#include "resdense/tape.hpp"

#include <algorithm>

namespace resdense {

template <typename T>
void Tape<T>::record(std::string op, std::vector<ImplPtr> inputs, ImplPtr output,
                     std::function<void()> backward) {
  output->requires_grad = true;
  output->is_leaf = false;
  nodes_.push_back(Node{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? shape_to_string(loss.shape()) : std::string("<undefined>")));
  }
  const auto loss_it = std::find_if(nodes_.rbegin(), nodes_.rend(), [&](const Node& node) {
    return node.output.get() == loss.handle().get();
  });
  if (loss_it == nodes_.rend()) {
    throw Error("backward(): loss tensor was not produced on this tape");
  }

  for (auto& node : nodes_) {
    for (auto& in : node.inputs) {
      if (in->requires_grad) in->grad.assign(in->data.size(), T{0});
    }
    node.output->grad.assign(node.output->data.size(), T{0});
  }
  loss.handle()->grad[0] = T{1};

  for (auto it = loss_it; it != nodes_.rend(); ++it) {
    it->backward();
  }
  reset();
}

template class Tape<float>;
template class Tape<double>;

}  // namespace resdense
