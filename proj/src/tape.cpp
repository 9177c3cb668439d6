#include "mamat/tape.hpp"

#include <algorithm>
#include <cassert>

namespace mamat {

template <class T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{"constant", {}, std::move(value), {}, false});
  grads_.emplace_back();
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Tape<T>::param(const std::string& name, Tensor<T> value) {
  if (params_.count(name)) throw std::invalid_argument("parameter registered twice: " + name);
  nodes_.push_back(Node{"param", {}, std::move(value), {}, true});
  grads_.emplace_back();
  params_.emplace(name, nodes_.size() - 1);
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  nodes_.push_back(Node{"variable", {}, std::move(value), {}, true});
  grads_.emplace_back();
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Tape<T>::record(std::string_view op, std::vector<std::size_t> inputs, Tensor<T> value,
                       BackwardFn backward) {
  bool needs = false;
  for (auto id : inputs) {
    assert(id < nodes_.size());
    needs = needs || nodes_[id].requires_grad;
  }
  needs = needs && grad_enabled_;
  if (!needs) backward = nullptr;
  nodes_.push_back(Node{std::string(op), std::move(inputs), std::move(value), std::move(backward), needs});
  grads_.emplace_back();
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
void Tape<T>::accumulate(std::size_t id, const Tensor<T>& grad) {
  if (!nodes_[id].requires_grad) return;
  auto& slot = grads_[id];
  if (!slot) {
    slot = grad;
    return;
  }
  if (slot->shape() != grad.shape()) {
    throw ShapeError("gradient shape " + shape_str(grad.shape()) + " does not match node shape " +
                     shape_str(slot->shape()));
  }
  auto dst = slot->data();
  auto src = grad.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class T>
void Tape<T>::accumulate(std::size_t id, Tensor<T>&& grad) {
  if (!nodes_[id].requires_grad) return;
  if (!grads_[id]) {
    grads_[id] = std::move(grad);
    return;
  }
  accumulate(id, static_cast<const Tensor<T>&>(grad));
}

template <class T>
std::map<std::string, Tensor<T>> Tape<T>::backward(Var<T> loss) {
  if (loss.value().size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  for (auto& g : grads_) g.reset();
  grads_[loss.id()] = Tensor<T>(loss.shape(), T(1));

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (!grads_[i] || !node.backward) continue;
    assert(std::all_of(node.inputs.begin(), node.inputs.end(), [i](std::size_t in) { return in < i; }));
    // Inputs precede the node, so the closure never accumulates into slot i.
    Tensor<T> g = std::move(*grads_[i]);
    node.backward(*this, g);
    grads_[i] = std::move(g);
  }

  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, id] : params_) {
    if (grads_[id])
      out.emplace(name, *grads_[id]);
    else
      out.emplace(name, Tensor<T>::zeros_like(nodes_[id].value));
  }
  return out;
}

template <class T>
const Tensor<T>* Tape<T>::grad(Var<T> v) const {
  const auto& g = grads_.at(v.id());
  return g ? &*g : nullptr;
}

template <class T>
std::optional<Var<T>> Tape<T>::find_param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) return std::nullopt;
  return Var<T>(const_cast<Tape*>(this), it->second);
}

template class Tape<float>;
template class Tape<double>;
template class Tape<long double>;

}  // namespace mamat
