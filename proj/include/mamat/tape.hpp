#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mamat/tensor.hpp"

namespace mamat {

template <class T>
class Tape;

// Handle to a node recorded on a Tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode record of differentiable primitive applications.
//
// Nodes are appended in evaluation order, so inputs always precede outputs and
// a single reverse sweep visits every node once. Gradients accumulate in tape
// order, which makes backward deterministic.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that never receives a gradient.
  Var<T> constant(Tensor<T> value);
  // Named trainable leaf. Registering the same name twice is an error.
  Var<T> param(const std::string& name, Tensor<T> value);
  // Unnamed leaf that receives a gradient (for checking gradients w.r.t. inputs).
  Var<T> variable(Tensor<T> value);

  Var<T> record(std::string_view op, std::vector<std::size_t> inputs, Tensor<T> value,
                BackwardFn backward);

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  void accumulate(std::size_t id, const Tensor<T>& grad);
  void accumulate(std::size_t id, Tensor<T>&& grad);

  // Propagates d loss / d node for every node reachable from `loss` and
  // returns the gradient of every registered parameter (zeros if unreachable).
  std::map<std::string, Tensor<T>> backward(Var<T> loss);

  // Gradient of a node after backward(); nullptr when the node was not reached.
  const Tensor<T>* grad(Var<T> v) const;

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  std::optional<Var<T>> find_param(const std::string& name) const;
  const std::map<std::string, std::size_t>& params() const { return params_; }

  // With recording disabled no backward closures are kept (inference).
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  std::deque<Node> nodes_;
  std::deque<std::optional<Tensor<T>>> grads_;
  std::map<std::string, std::size_t> params_;
  bool grad_enabled_ = true;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

extern template class Tape<float>;
extern template class Tape<double>;
extern template class Tape<long double>;

}  // namespace mamat
