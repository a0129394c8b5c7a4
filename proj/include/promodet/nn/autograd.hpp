#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "promodet/nn/tensor.hpp"

namespace promodet::nn {

// A value in the computation graph. `grad` stays empty until something
// flows back into the node.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::function<void(const Tensor<T>&)> backward_fn;

  explicit Node(Tensor<T> v, bool rg = false) : value(std::move(v)), requires_grad(rg) {}

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (grad.empty()) {
      grad = g;
    } else {
      add_into(grad, g);
    }
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

// Reverse-mode tape. Ops append nodes in execution order; backward() walks
// them in reverse. A disabled tape computes values only (inference mode).
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>&)>;

  explicit Tape(bool enabled = true) : enabled_(enabled) {}

  bool enabled() const { return enabled_; }

  Var<T> constant(Tensor<T> v) const {
    return std::make_shared<Node<T>>(std::move(v), false);
  }
  Var<T> leaf(Tensor<T> v, bool requires_grad = true) const {
    return std::make_shared<Node<T>>(std::move(v), requires_grad && enabled_);
  }

  // `make_fn` is only invoked when some parent needs a gradient, so ops can
  // skip caching forward intermediates in inference mode.
  template <typename MakeFn>
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, MakeFn&& make_fn) {
    bool needs = false;
    if (enabled_) {
      for (const auto& p : parents) needs = needs || (p && p->requires_grad);
    }
    auto node = std::make_shared<Node<T>>(std::move(value), needs);
    if (needs) {
      node->backward_fn = make_fn();
      nodes_.push_back(node);
    }
    return node;
  }

  void backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (!n.grad.empty() && n.backward_fn) n.backward_fn(n.grad);
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  bool enabled_;
  std::vector<Var<T>> nodes_;
};

// Trainable tensor with persistent gradient accumulator and momentum slot.
template <typename T>
struct Parameter {
  Var<T> var;
  Tensor<T> momentum;

  Parameter() = default;
  explicit Parameter(Tensor<T> init)
      : var(std::make_shared<Node<T>>(std::move(init), true)) {}

  Tensor<T>& value() { return var->value; }
  const Tensor<T>& value() const { return var->value; }
  void zero_grad() { var->grad = Tensor<T>(); }
};

}  // namespace promodet::nn
