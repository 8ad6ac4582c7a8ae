#include "dmx/autodiff.hpp"

#include <stdexcept>
#include <utility>

namespace dmx {

namespace K = kernels;

template <typename T>
typename Tape<T>::Var Tape<T>::push(TensorT<T> value, bool requires_grad) {
  values_.push_back(std::move(value));
  requires_grad_.push_back(requires_grad);
  return Var{static_cast<std::int32_t>(values_.size() - 1)};
}

template <typename T>
void Tape<T>::check(Var v) const {
  if (!v.valid() || static_cast<std::size_t>(v.id) >= values_.size())
    throw std::logic_error("tape: invalid variable handle");
}

template <typename T>
void Tape<T>::accumulate(std::int32_t id, const TensorT<T>& g) {
  TensorT<T>& dst = grads_[static_cast<std::size_t>(id)];
  for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] += g.data[i];
}

template <typename T>
typename Tape<T>::Var Tape<T>::leaf(TensorT<T> value, bool requires_grad) {
  return push(std::move(value), requires_grad);
}

template <typename T>
typename Tape<T>::Var Tape<T>::conv2d(Var input, Var weight, Var bias, kernels::ConvSpec spec) {
  check(input);
  check(weight);
  check(bias);
  const bool rg = requires_grad_[input.id] || requires_grad_[weight.id] || requires_grad_[bias.id];
  Var out = push(K::conv2d_forward(values_[input.id], values_[weight.id], values_[bias.id], spec),
                 rg);
  if (rg) {
    nodes_.push_back([this, input, weight, bias, out, spec] {
      const TensorT<T>& g = grads_[out.id];
      const TensorT<T>& in_v = values_[input.id];
      if (requires_grad_[input.id])
        accumulate(input.id,
                   K::conv2d_backward_input(g, values_[weight.id], in_v.dim(1), in_v.dim(2), spec));
      if (requires_grad_[weight.id])
        accumulate(weight.id,
                   K::conv2d_backward_weight(g, in_v, values_[weight.id].dim(2), spec));
      if (requires_grad_[bias.id]) accumulate(bias.id, K::conv2d_backward_bias(g));
    });
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::relu(Var x) {
  check(x);
  const bool rg = requires_grad_[x.id];
  Var out = push(K::relu_forward(values_[x.id]), rg);
  if (rg) {
    nodes_.push_back([this, x, out] {
      accumulate(x.id, K::relu_backward(grads_[out.id], values_[x.id]));
    });
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::add(Var a, Var b) {
  check(a);
  check(b);
  if (!values_[a.id].same_shape(values_[b.id]))
    throw std::invalid_argument("tape add: shape mismatch");
  TensorT<T> v(values_[a.id].shape);
  for (std::size_t i = 0; i < v.numel(); ++i)
    v.data[i] = values_[a.id].data[i] + values_[b.id].data[i];
  const bool rg = requires_grad_[a.id] || requires_grad_[b.id];
  Var out = push(std::move(v), rg);
  if (rg) {
    nodes_.push_back([this, a, b, out] {
      if (requires_grad_[a.id]) accumulate(a.id, grads_[out.id]);
      if (requires_grad_[b.id]) accumulate(b.id, grads_[out.id]);
    });
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::scale(Var x, T factor) {
  check(x);
  TensorT<T> v(values_[x.id].shape);
  for (std::size_t i = 0; i < v.numel(); ++i) v.data[i] = values_[x.id].data[i] * factor;
  const bool rg = requires_grad_[x.id];
  Var out = push(std::move(v), rg);
  if (rg) {
    nodes_.push_back([this, x, out, factor] {
      const TensorT<T>& g = grads_[out.id];
      TensorT<T> dx(g.shape);
      for (std::size_t i = 0; i < g.numel(); ++i) dx.data[i] = g.data[i] * factor;
      accumulate(x.id, dx);
    });
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::sum(Var x) {
  check(x);
  T s = 0;
  for (T v : values_[x.id].data) s += v;
  const bool rg = requires_grad_[x.id];
  Var out = push(TensorT<T>::scalar(s), rg);
  if (rg) {
    nodes_.push_back([this, x, out] {
      const T g = grads_[out.id].data[0];
      TensorT<T> dx(values_[x.id].shape, g);
      accumulate(x.id, dx);
    });
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::upsample_bilinear(Var x, int factor) {
  check(x);
  const bool rg = requires_grad_[x.id];
  const int ih = values_[x.id].dim(1), iw = values_[x.id].dim(2);
  Var out = push(K::upsample_forward(values_[x.id], factor), rg);
  if (rg) {
    nodes_.push_back([this, x, out, factor, ih, iw] {
      accumulate(x.id, K::upsample_backward(grads_[out.id], factor, ih, iw));
    });
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::softmax_channel(Var x) {
  check(x);
  const bool rg = requires_grad_[x.id];
  Var out = push(K::softmax_channel(values_[x.id]), rg);
  if (rg) {
    nodes_.push_back([this, x, out] {
      accumulate(x.id, K::softmax_backward(values_[out.id], grads_[out.id]));
    });
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::cross_entropy(Var logits, LabelMap labels) {
  check(logits);
  const bool rg = requires_grad_[logits.id];
  TensorT<T> probs;
  const T loss = K::cross_entropy(values_[logits.id], labels, rg ? &probs : nullptr);
  Var out = push(TensorT<T>::scalar(loss), rg);
  if (rg) {
    nodes_.push_back([this, logits, out, probs = std::move(probs), labels = std::move(labels)] {
      TensorT<T> dx = K::cross_entropy_grad(probs, labels);
      const T g = grads_[out.id].data[0];
      if (g != T(1))
        for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] *= g;
      accumulate(logits.id, dx);
    });
  }
  return out;
}

template <typename T>
typename Tape<T>::Var Tape<T>::kl_divergence(TensorT<T> target_probs, Var logits) {
  check(logits);
  const bool rg = requires_grad_[logits.id];
  TensorT<T> probs;
  const T loss = K::kl_divergence(target_probs, values_[logits.id], rg ? &probs : nullptr);
  Var out = push(TensorT<T>::scalar(loss), rg);
  if (rg) {
    nodes_.push_back(
        [this, logits, out, probs = std::move(probs), target = std::move(target_probs)] {
          TensorT<T> dx = K::kl_divergence_grad(probs, target);
          const T g = grads_[out.id].data[0];
          if (g != T(1))
            for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] *= g;
          accumulate(logits.id, dx);
        });
  }
  return out;
}

template <typename T>
const TensorT<T>& Tape<T>::value(Var v) const {
  check(v);
  return values_[v.id];
}

template <typename T>
T Tape<T>::scalar_value(Var v) const {
  check(v);
  if (values_[v.id].numel() != 1) throw std::logic_error("tape: value is not a scalar");
  return values_[v.id].data[0];
}

template <typename T>
const TensorT<T>& Tape<T>::grad(Var v) const {
  check(v);
  if (!backward_done_) throw std::logic_error("tape: grad() before backward()");
  return grads_[v.id];
}

template <typename T>
void Tape<T>::backward(Var loss) {
  check(loss);
  if (backward_done_)
    throw std::logic_error("tape: backward() already ran; reset() before reuse");
  if (values_[loss.id].numel() != 1)
    throw std::invalid_argument("tape: backward() needs a scalar loss");
  grads_.clear();
  grads_.reserve(values_.size());
  for (const auto& v : values_) grads_.emplace_back(v.shape);
  grads_[loss.id].data[0] = T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  backward_done_ = true;
}

template <typename T>
void Tape<T>::reset() {
  values_.clear();
  grads_.clear();
  requires_grad_.clear();
  nodes_.clear();
  backward_done_ = false;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace dmx
