#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dmx/kernels.hpp"
#include "dmx/label_map.hpp"
#include "dmx/tensor.hpp"

namespace dmx {

// Reverse-mode tape over the fixed op set of the segmentation network and its
// losses. One tape per training step; backward() may run once per tape.
// Gradients accumulate additively when a value feeds several consumers.
template <typename T>
class Tape {
 public:
  struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(TensorT<T> value, bool requires_grad = true);
  Var constant(TensorT<T> value) { return leaf(std::move(value), false); }

  Var conv2d(Var input, Var weight, Var bias, kernels::ConvSpec spec);
  Var relu(Var x);
  Var add(Var a, Var b);
  Var scale(Var x, T factor);
  Var sum(Var x);
  Var upsample_bilinear(Var x, int factor);
  Var softmax_channel(Var x);
  Var cross_entropy(Var logits, LabelMap labels);
  // Target distribution is held constant; no gradient flows into it.
  Var kl_divergence(TensorT<T> target_probs, Var logits);

  const TensorT<T>& value(Var v) const;
  T scalar_value(Var v) const;
  // Valid after backward(); zero for parameters unreachable from the loss.
  const TensorT<T>& grad(Var v) const;

  void backward(Var loss);
  void reset();
  bool backward_done() const { return backward_done_; }

 private:
  Var push(TensorT<T> value, bool requires_grad);
  void check(Var v) const;
  void accumulate(std::int32_t id, const TensorT<T>& g);

  std::vector<TensorT<T>> values_;
  std::vector<TensorT<T>> grads_;
  std::vector<bool> requires_grad_;
  std::vector<std::function<void()>> nodes_;
  bool backward_done_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace dmx
