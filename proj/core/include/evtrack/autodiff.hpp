#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "evtrack/nd_array.hpp"

namespace evtrack {

// A value node in the computation graph. Gradients are accumulated into
// `grad` (allocated on first touch) by the tape's backward replay.
template <typename T>
struct Node {
  NdArray<T> value;
  NdArray<T> grad;
  bool requires_grad = true;

  explicit Node(NdArray<T> v, bool req = true)
      : value(std::move(v)), requires_grad(req) {}

  NdArray<T>& grad_buffer() {
    if (grad.numel() != value.numel()) grad = NdArray<T>::zeros(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.numel() == value.numel(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_var(NdArray<T> v, bool requires_grad = true) {
  return std::make_shared<Node<T>>(std::move(v), requires_grad);
}

template <typename T>
Var<T> make_const(NdArray<T> v) {
  return make_var(std::move(v), false);
}

// Wengert list: primitives append one backward closure per executed op, and
// backward() replays the closures in exact reverse execution order. A
// disabled tape records nothing, which is the inference path.
template <typename T>
class Tape {
 public:
  explicit Tape(bool enabled = true) : enabled_(enabled) {}

  bool enabled() const { return enabled_; }
  void set_enabled(bool e) { enabled_ = e; }
  std::size_t size() const { return ops_.size(); }

  void record(std::function<void()> backward_op) {
    if (enabled_) ops_.push_back(std::move(backward_op));
  }

  // Replays recorded closures last-to-first. Callers seed output grads first.
  void replay() {
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  void backward(const Var<T>& loss) {
    auto& g = loss->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = T{1};
    replay();
  }

  void backward(const Var<T>& out, const NdArray<T>& seed) {
    require_shape(seed, out->value.shape(), "backward seed");
    auto& g = out->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
    replay();
  }

  void clear() { ops_.clear(); }

 private:
  bool enabled_;
  std::vector<std::function<void()>> ops_;
};

template <typename T>
void accumulate(NdArray<T>& dst, const NdArray<T>& src) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

}  // namespace evtrack
