#pragma once

#include "dmx/label_map.hpp"
#include "dmx/tensor.hpp"

namespace dmx::kernels {

struct ConvSpec {
  int stride = 1;
  int dilation = 1;
  int padding = 0;
};

inline int conv_out_dim(int in, int k, int stride, int dilation, int padding) {
  return (in + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
}

// Parallel kernels. Every loop writes disjoint outputs and accumulates in a
// fixed order, so results are independent of the thread count and identical
// from run to run.

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& input, const TensorT<T>& weight,
                          const TensorT<T>& bias, const ConvSpec& spec);
template <typename T>
TensorT<T> conv2d_backward_input(const TensorT<T>& grad_out, const TensorT<T>& weight,
                                 int in_h, int in_w, const ConvSpec& spec);
template <typename T>
TensorT<T> conv2d_backward_weight(const TensorT<T>& grad_out, const TensorT<T>& input,
                                  int kernel, const ConvSpec& spec);
template <typename T>
TensorT<T> conv2d_backward_bias(const TensorT<T>& grad_out);

template <typename T>
TensorT<T> relu_forward(const TensorT<T>& input);
// Subgradient at 0 is 0; the mask is strict x > 0.
template <typename T>
TensorT<T> relu_backward(const TensorT<T>& grad_out, const TensorT<T>& input);

// Half-pixel-center bilinear interpolation (sample centers at
// (i + 0.5) / factor - 0.5), factor >= 1.
template <typename T>
TensorT<T> upsample_forward(const TensorT<T>& input, int factor);
template <typename T>
TensorT<T> upsample_backward(const TensorT<T>& grad_out, int factor, int in_h, int in_w);

// Per-pixel softmax over the channel dimension of a (C,H,W) tensor,
// max-subtracted for stability.
template <typename T>
TensorT<T> softmax_channel(const TensorT<T>& logits);
template <typename T>
TensorT<T> softmax_backward(const TensorT<T>& probs, const TensorT<T>& grad_out);

// Mean of -log p[label] over non-ignored pixels; 0 when everything is
// ignored. probs_out (optional) receives the softmax for the backward pass.
template <typename T>
T cross_entropy(const TensorT<T>& logits, const LabelMap& labels, TensorT<T>* probs_out = nullptr);
template <typename T>
TensorT<T> cross_entropy_grad(const TensorT<T>& probs, const LabelMap& labels);

// KL(target || softmax(logits)), mean over pixels, target held constant.
template <typename T>
T kl_divergence(const TensorT<T>& target_probs, const TensorT<T>& logits,
                TensorT<T>* probs_out = nullptr);
// (p_student - p_target) / num_pixels
template <typename T>
TensorT<T> kl_divergence_grad(const TensorT<T>& probs, const TensorT<T>& target_probs);

// Serial reference implementations, kept for correctness tests and the
// kernel benchmark. Same contracts as above.
namespace serial {

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& input, const TensorT<T>& weight,
                          const TensorT<T>& bias, const ConvSpec& spec);
template <typename T>
TensorT<T> conv2d_backward_input(const TensorT<T>& grad_out, const TensorT<T>& weight,
                                 int in_h, int in_w, const ConvSpec& spec);
template <typename T>
TensorT<T> conv2d_backward_weight(const TensorT<T>& grad_out, const TensorT<T>& input,
                                  int kernel, const ConvSpec& spec);
template <typename T>
TensorT<T> conv2d_backward_bias(const TensorT<T>& grad_out);
template <typename T>
TensorT<T> relu_forward(const TensorT<T>& input);
template <typename T>
TensorT<T> relu_backward(const TensorT<T>& grad_out, const TensorT<T>& input);
template <typename T>
TensorT<T> upsample_forward(const TensorT<T>& input, int factor);
template <typename T>
TensorT<T> upsample_backward(const TensorT<T>& grad_out, int factor, int in_h, int in_w);
template <typename T>
TensorT<T> softmax_channel(const TensorT<T>& logits);
template <typename T>
T cross_entropy(const TensorT<T>& logits, const LabelMap& labels, TensorT<T>* probs_out = nullptr);
template <typename T>
T kl_divergence(const TensorT<T>& target_probs, const TensorT<T>& logits,
                TensorT<T>* probs_out = nullptr);

}  // namespace serial

}  // namespace dmx::kernels
