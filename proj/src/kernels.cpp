#include "dmx/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace dmx::kernels {

namespace {

#ifdef __GLIBC__
// Activation tensors sit right at glibc's default 128 KiB mmap threshold, so
// every op would pay an mmap/munmap page-fault cycle. Keep them on the heap.
const bool malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 64 << 20);
  return true;
}();
#endif

void check_conv_args(const std::vector<int>& in_shape, const std::vector<int>& w_shape,
                     const std::vector<int>& b_shape, const ConvSpec& spec) {
  if (in_shape.size() != 3) throw std::invalid_argument("conv2d: input must be (C,H,W)");
  if (w_shape.size() != 4) throw std::invalid_argument("conv2d: weight must be (Cout,Cin,k,k)");
  if (w_shape[2] != w_shape[3]) throw std::invalid_argument("conv2d: kernel must be square");
  if (w_shape[2] % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd");
  if (in_shape[0] != w_shape[1])
    throw std::invalid_argument("conv2d: input channels " + std::to_string(in_shape[0]) +
                                " do not match weight Cin " + std::to_string(w_shape[1]));
  if (b_shape.size() != 1 || b_shape[0] != w_shape[0])
    throw std::invalid_argument("conv2d: bias must be (Cout)");
  if (spec.stride < 1 || spec.dilation < 1 || spec.padding < 0)
    throw std::invalid_argument("conv2d: bad stride/dilation/padding");
}

// Valid output range [lo,hi) with 0 <= o*stride + off < limit.
inline void out_range(int off, int stride, int limit, int count, int* lo, int* hi) {
  int l = 0;
  if (off < 0) l = (-off + stride - 1) / stride;
  int top = limit - 1 - off;
  int h = top < 0 ? 0 : std::min(count, top / stride + 1);
  *lo = std::min(l, h);
  *hi = h;
}

struct UpsampleAxis {
  std::vector<int> i0, i1;
  std::vector<double> frac;
  UpsampleAxis(int in, int factor) {
    const int out = in * factor;
    i0.resize(out);
    i1.resize(out);
    frac.resize(out);
    for (int o = 0; o < out; ++o) {
      const double src = (o + 0.5) / factor - 0.5;
      const double fl = std::floor(src);
      int a = static_cast<int>(fl);
      frac[o] = src - fl;
      i0[o] = std::clamp(a, 0, in - 1);
      i1[o] = std::clamp(a + 1, 0, in - 1);
    }
  }
};

void check_chw(const std::vector<int>& s, const char* who) {
  if (s.size() != 3) throw std::invalid_argument(std::string(who) + ": tensor must be (C,H,W)");
}

void check_labels(const LabelMap& labels, int c, int h, int w) {
  if (labels.h != h || labels.w != w)
    throw std::invalid_argument("cross_entropy: label map shape does not match logits");
  for (std::uint8_t v : labels.v)
    if (v != kIgnoreLabel && v >= c)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(int(v)) +
                                  " out of range for " + std::to_string(c) + " classes");
}

}  // namespace

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& input, const TensorT<T>& weight,
                          const TensorT<T>& bias, const ConvSpec& spec) {
  check_conv_args(input.shape, weight.shape, bias.shape, spec);
  const int cin = input.dim(0), ih = input.dim(1), iw = input.dim(2);
  const int cout = weight.dim(0), k = weight.dim(2);
  const int oh = conv_out_dim(ih, k, spec.stride, spec.dilation, spec.padding);
  const int ow = conv_out_dim(iw, k, spec.stride, spec.dilation, spec.padding);
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: empty output");

  TensorT<T> out({cout, oh, ow});
  const T* in = input.data.data();
  const T* w = weight.data.data();
  const T* b = bias.data.data();
  T* o = out.data.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int co = 0; co < cout; ++co) {
    for (int oy = 0; oy < oh; ++oy) {
      T* orow = o + (static_cast<std::size_t>(co) * oh + oy) * ow;
      std::fill(orow, orow + ow, b[co]);
      for (int ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * spec.stride - spec.padding + ky * spec.dilation;
          if (iy < 0 || iy >= ih) continue;
          const T* irow = in + (static_cast<std::size_t>(ci) * ih + iy) * iw;
          const T* wrow = w + ((static_cast<std::size_t>(co) * cin + ci) * k + ky) * k;
          for (int kx = 0; kx < k; ++kx) {
            const int off = kx * spec.dilation - spec.padding;
            int lo, hi;
            out_range(off, spec.stride, iw, ow, &lo, &hi);
            const T wv = wrow[kx];
            if (spec.stride == 1) {
              const T* ir = irow + off;
              for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * ir[ox];
            } else {
              for (int ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox * spec.stride + off];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
TensorT<T> conv2d_backward_input(const TensorT<T>& grad_out, const TensorT<T>& weight,
                                 int in_h, int in_w, const ConvSpec& spec) {
  check_chw(grad_out.shape, "conv2d_backward_input");
  const int cout = grad_out.dim(0), oh = grad_out.dim(1), ow = grad_out.dim(2);
  const int cin = weight.dim(1), k = weight.dim(2);
  if (weight.dim(0) != cout)
    throw std::invalid_argument("conv2d_backward_input: weight Cout mismatch");

  TensorT<T> din({cin, in_h, in_w});
  const T* g = grad_out.data.data();
  const T* w = weight.data.data();
  T* d = din.data.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int ci = 0; ci < cin; ++ci) {
    for (int iy = 0; iy < in_h; ++iy) {
      T* drow = d + (static_cast<std::size_t>(ci) * in_h + iy) * in_w;
      for (int co = 0; co < cout; ++co) {
        for (int ky = 0; ky < k; ++ky) {
          const int t = iy + spec.padding - ky * spec.dilation;
          if (t < 0 || t % spec.stride != 0) continue;
          const int oy = t / spec.stride;
          if (oy >= oh) continue;
          const T* grow = g + (static_cast<std::size_t>(co) * oh + oy) * ow;
          const T* wrow = w + ((static_cast<std::size_t>(co) * cin + ci) * k + ky) * k;
          for (int kx = 0; kx < k; ++kx) {
            const int off = kx * spec.dilation - spec.padding;
            int lo, hi;
            out_range(off, spec.stride, in_w, ow, &lo, &hi);
            const T wv = wrow[kx];
            if (spec.stride == 1) {
              T* dr = drow + off;
              for (int ox = lo; ox < hi; ++ox) dr[ox] += wv * grow[ox];
            } else {
              for (int ox = lo; ox < hi; ++ox) drow[ox * spec.stride + off] += wv * grow[ox];
            }
          }
        }
      }
    }
  }
  return din;
}

template <typename T>
TensorT<T> conv2d_backward_weight(const TensorT<T>& grad_out, const TensorT<T>& input,
                                  int kernel, const ConvSpec& spec) {
  check_chw(grad_out.shape, "conv2d_backward_weight");
  check_chw(input.shape, "conv2d_backward_weight");
  const int cout = grad_out.dim(0), oh = grad_out.dim(1), ow = grad_out.dim(2);
  const int cin = input.dim(0), ih = input.dim(1), iw = input.dim(2);
  const int k = kernel;

  TensorT<T> dw({cout, cin, k, k});
  const T* g = grad_out.data.data();
  const T* in = input.data.data();
  T* d = dw.data.data();

  // All k*k taps accumulate in one pass per row pair, 8 fixed partial sums
  // per tap combined in a pinned order; results do not depend on the thread
  // count. Taps beyond the lane buffer fall back to the per-tap scan.
  constexpr int kMaxTaps = 81;
#pragma omp parallel for collapse(2) schedule(static)
  for (int co = 0; co < cout; ++co) {
    for (int ci = 0; ci < cin; ++ci) {
      T* dtap = d + (static_cast<std::size_t>(co) * cin + ci) * k * k;
      if (k * k <= kMaxTaps) {
        T acc[kMaxTaps][8] = {};
        for (int oy = 0; oy < oh; ++oy) {
          const T* grow = g + (static_cast<std::size_t>(co) * oh + oy) * ow;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * spec.stride - spec.padding + ky * spec.dilation;
            if (iy < 0 || iy >= ih) continue;
            const T* irow = in + (static_cast<std::size_t>(ci) * ih + iy) * iw;
            for (int kx = 0; kx < k; ++kx) {
              const int off = kx * spec.dilation - spec.padding;
              int lo, hi;
              out_range(off, spec.stride, iw, ow, &lo, &hi);
              T* a = acc[ky * k + kx];
              if (spec.stride == 1) {
                const T* ir = irow + off;
                int ox = lo;
                for (; ox + 8 <= hi; ox += 8)
                  for (int j = 0; j < 8; ++j) a[j] += grow[ox + j] * ir[ox + j];
                for (; ox < hi; ++ox) a[0] += grow[ox] * ir[ox];
              } else {
                int ox = lo;
                for (; ox + 4 <= hi; ox += 4)
                  for (int j = 0; j < 4; ++j)
                    a[j] += grow[ox + j] * irow[(ox + j) * spec.stride + off];
                for (; ox < hi; ++ox) a[0] += grow[ox] * irow[ox * spec.stride + off];
              }
            }
          }
        }
        for (int t = 0; t < k * k; ++t)
          dtap[t] = ((acc[t][0] + acc[t][1]) + (acc[t][2] + acc[t][3])) +
                    ((acc[t][4] + acc[t][5]) + (acc[t][6] + acc[t][7]));
      } else {
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const int off = kx * spec.dilation - spec.padding;
            int lo, hi;
            out_range(off, spec.stride, iw, ow, &lo, &hi);
            T acc = 0;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * spec.stride - spec.padding + ky * spec.dilation;
              if (iy < 0 || iy >= ih) continue;
              const T* grow = g + (static_cast<std::size_t>(co) * oh + oy) * ow;
              const T* irow = in + (static_cast<std::size_t>(ci) * ih + iy) * iw;
              for (int ox = lo; ox < hi; ++ox)
                acc += grow[ox] * irow[ox * spec.stride + off];
            }
            dtap[ky * k + kx] = acc;
          }
        }
      }
    }
  }
  return dw;
}

template <typename T>
TensorT<T> conv2d_backward_bias(const TensorT<T>& grad_out) {
  check_chw(grad_out.shape, "conv2d_backward_bias");
  const int cout = grad_out.dim(0);
  const std::size_t plane = static_cast<std::size_t>(grad_out.dim(1)) * grad_out.dim(2);
  TensorT<T> db({cout});
#pragma omp parallel for schedule(static)
  for (int co = 0; co < cout; ++co) {
    const T* p = grad_out.data.data() + co * plane;
    T s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += p[i];
    db[co] = s;
  }
  return db;
}

template <typename T>
TensorT<T> relu_forward(const TensorT<T>& input) {
  TensorT<T> out(input.shape);
  const std::size_t n = input.numel();
  const T* in = input.data.data();
  T* o = out.data.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
    o[i] = in[i] > T(0) ? in[i] : T(0);
  return out;
}

template <typename T>
TensorT<T> relu_backward(const TensorT<T>& grad_out, const TensorT<T>& input) {
  if (!grad_out.same_shape(input))
    throw std::invalid_argument("relu_backward: shape mismatch");
  TensorT<T> out(input.shape);
  const std::size_t n = input.numel();
  const T* g = grad_out.data.data();
  const T* in = input.data.data();
  T* o = out.data.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
    o[i] = in[i] > T(0) ? g[i] : T(0);
  return out;
}

template <typename T>
TensorT<T> upsample_forward(const TensorT<T>& input, int factor) {
  check_chw(input.shape, "upsample_forward");
  if (factor < 1) throw std::invalid_argument("upsample: factor must be >= 1");
  if (factor == 1) return input;
  const int c = input.dim(0), ih = input.dim(1), iw = input.dim(2);
  const int oh = ih * factor, ow = iw * factor;
  const UpsampleAxis ay(ih, factor), ax(iw, factor);

  TensorT<T> out({c, oh, ow});
  const T* in = input.data.data();
  T* o = out.data.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < oh; ++oy) {
      const T* p0 = in + (static_cast<std::size_t>(ch) * ih + ay.i0[oy]) * iw;
      const T* p1 = in + (static_cast<std::size_t>(ch) * ih + ay.i1[oy]) * iw;
      const T wy = static_cast<T>(ay.frac[oy]);
      T* orow = o + (static_cast<std::size_t>(ch) * oh + oy) * ow;
      for (int ox = 0; ox < ow; ++ox) {
        const T wx = static_cast<T>(ax.frac[ox]);
        const T top = (T(1) - wx) * p0[ax.i0[ox]] + wx * p0[ax.i1[ox]];
        const T bot = (T(1) - wx) * p1[ax.i0[ox]] + wx * p1[ax.i1[ox]];
        orow[ox] = (T(1) - wy) * top + wy * bot;
      }
    }
  }
  return out;
}

template <typename T>
TensorT<T> upsample_backward(const TensorT<T>& grad_out, int factor, int in_h, int in_w) {
  check_chw(grad_out.shape, "upsample_backward");
  if (factor < 1) throw std::invalid_argument("upsample: factor must be >= 1");
  if (factor == 1) return grad_out;
  const int c = grad_out.dim(0), oh = grad_out.dim(1), ow = grad_out.dim(2);
  if (oh != in_h * factor || ow != in_w * factor)
    throw std::invalid_argument("upsample_backward: shape mismatch");
  const UpsampleAxis ay(in_h, factor), ax(in_w, factor);

  TensorT<T> din({c, in_h, in_w});
  const T* g = grad_out.data.data();
  T* d = din.data.data();
  // Scatter is per-channel serial; channels are disjoint.
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < c; ++ch) {
    T* dch = d + static_cast<std::size_t>(ch) * in_h * in_w;
    const T* gch = g + static_cast<std::size_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const T wy = static_cast<T>(ay.frac[oy]);
      T* r0 = dch + static_cast<std::size_t>(ay.i0[oy]) * in_w;
      T* r1 = dch + static_cast<std::size_t>(ay.i1[oy]) * in_w;
      const T* grow = gch + static_cast<std::size_t>(oy) * ow;
      for (int ox = 0; ox < ow; ++ox) {
        const T wx = static_cast<T>(ax.frac[ox]);
        const T gv = grow[ox];
        r0[ax.i0[ox]] += (T(1) - wy) * (T(1) - wx) * gv;
        r0[ax.i1[ox]] += (T(1) - wy) * wx * gv;
        r1[ax.i0[ox]] += wy * (T(1) - wx) * gv;
        r1[ax.i1[ox]] += wy * wx * gv;
      }
    }
  }
  return din;
}

template <typename T>
TensorT<T> softmax_channel(const TensorT<T>& logits) {
  check_chw(logits.shape, "softmax_channel");
  const int c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  TensorT<T> out(logits.shape);
  const T* in = logits.data.data();
  T* o = out.data.data();
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      T m = in[p];
      for (int k = 1; k < c; ++k) m = std::max(m, in[k * plane + p]);
      T sum = 0;
      for (int k = 0; k < c; ++k) {
        const T e = std::exp(in[k * plane + p] - m);
        o[k * plane + p] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (int k = 0; k < c; ++k) o[k * plane + p] *= inv;
    }
  }
  return out;
}

template <typename T>
TensorT<T> softmax_backward(const TensorT<T>& probs, const TensorT<T>& grad_out) {
  if (!probs.same_shape(grad_out))
    throw std::invalid_argument("softmax_backward: shape mismatch");
  const int c = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  TensorT<T> din(probs.shape);
  const T* p = probs.data.data();
  const T* g = grad_out.data.data();
  T* d = din.data.data();
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t q = static_cast<std::size_t>(y) * w + x;
      T dot = 0;
      for (int k = 0; k < c; ++k) dot += g[k * plane + q] * p[k * plane + q];
      for (int k = 0; k < c; ++k)
        d[k * plane + q] = p[k * plane + q] * (g[k * plane + q] - dot);
    }
  }
  return din;
}

template <typename T>
T cross_entropy(const TensorT<T>& logits, const LabelMap& labels, TensorT<T>* probs_out) {
  check_chw(logits.shape, "cross_entropy");
  const int c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  check_labels(labels, c, h, w);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const T* in = logits.data.data();

  if (probs_out) *probs_out = TensorT<T>(logits.shape);
  T* po = probs_out ? probs_out->data.data() : nullptr;

  std::vector<T> row_loss(h, T(0));
  std::vector<std::int64_t> row_valid(h, 0);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    T acc = 0;
    std::int64_t valid = 0;
    for (int x = 0; x < w; ++x) {
      const std::size_t q = static_cast<std::size_t>(y) * w + x;
      T m = in[q];
      for (int k = 1; k < c; ++k) m = std::max(m, in[k * plane + q]);
      T sum = 0;
      for (int k = 0; k < c; ++k) sum += std::exp(in[k * plane + q] - m);
      const T lse = m + std::log(sum);
      if (po) {
        for (int k = 0; k < c; ++k) po[k * plane + q] = std::exp(in[k * plane + q] - lse);
      }
      const std::uint8_t lab = labels.v[q];
      if (lab == kIgnoreLabel) continue;
      acc += lse - in[static_cast<std::size_t>(lab) * plane + q];
      ++valid;
    }
    row_loss[y] = acc;
    row_valid[y] = valid;
  }
  T total = 0;
  std::int64_t n = 0;
  for (int y = 0; y < h; ++y) {
    total += row_loss[y];
    n += row_valid[y];
  }
  return n == 0 ? T(0) : total / static_cast<T>(n);
}

template <typename T>
TensorT<T> cross_entropy_grad(const TensorT<T>& probs, const LabelMap& labels) {
  check_chw(probs.shape, "cross_entropy_grad");
  const int c = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::int64_t n = 0;
  for (std::uint8_t v : labels.v)
    if (v != kIgnoreLabel) ++n;
  TensorT<T> din(probs.shape);
  if (n == 0) return din;
  const T scale = T(1) / static_cast<T>(n);
  const T* p = probs.data.data();
  T* d = din.data.data();
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t q = static_cast<std::size_t>(y) * w + x;
      const std::uint8_t lab = labels.v[q];
      if (lab == kIgnoreLabel) continue;
      for (int k = 0; k < c; ++k) d[k * plane + q] = p[k * plane + q] * scale;
      d[static_cast<std::size_t>(lab) * plane + q] -= scale;
    }
  }
  return din;
}

namespace {

template <typename T>
void check_target_probs(const TensorT<T>& target, int c, std::size_t plane) {
  const T* t = target.data.data();
  for (std::size_t q = 0; q < plane; ++q) {
    T sum = 0;
    for (int k = 0; k < c; ++k) {
      const T v = t[k * plane + q];
      if (v < T(0)) throw std::invalid_argument("kl_divergence: negative target probability");
      sum += v;
    }
    if (std::abs(sum - T(1)) > T(1e-5))
      throw std::invalid_argument("kl_divergence: target probabilities do not sum to 1");
  }
}

}  // namespace

template <typename T>
T kl_divergence(const TensorT<T>& target_probs, const TensorT<T>& logits,
                TensorT<T>* probs_out) {
  check_chw(logits.shape, "kl_divergence");
  if (!target_probs.same_shape(logits))
    throw std::invalid_argument("kl_divergence: target/logits shape mismatch");
  const int c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  check_target_probs(target_probs, c, plane);

  if (probs_out) *probs_out = TensorT<T>(logits.shape);
  T* po = probs_out ? probs_out->data.data() : nullptr;
  const T* in = logits.data.data();
  const T* t = target_probs.data.data();

  std::vector<T> row_sum(h, T(0));
#pragma omp parallel for schedule(static)
  for (int y = 0; y < h; ++y) {
    T acc = 0;
    for (int x = 0; x < w; ++x) {
      const std::size_t q = static_cast<std::size_t>(y) * w + x;
      T m = in[q];
      for (int k = 1; k < c; ++k) m = std::max(m, in[k * plane + q]);
      T sum = 0;
      for (int k = 0; k < c; ++k) sum += std::exp(in[k * plane + q] - m);
      const T lse = m + std::log(sum);
      T pix = 0;
      for (int k = 0; k < c; ++k) {
        const T pt = t[k * plane + q];
        const T logps = in[k * plane + q] - lse;
        if (po) po[k * plane + q] = std::exp(logps);
        if (pt > T(0)) pix += pt * (std::log(pt) - logps);
      }
      // KL per pixel is nonnegative; drop rounding residue near 0.
      acc += std::max(pix, T(0));
    }
    row_sum[y] = acc;
  }
  T total = 0;
  for (int y = 0; y < h; ++y) total += row_sum[y];
  return total / static_cast<T>(plane);
}

template <typename T>
TensorT<T> kl_divergence_grad(const TensorT<T>& probs, const TensorT<T>& target_probs) {
  if (!probs.same_shape(target_probs))
    throw std::invalid_argument("kl_divergence_grad: shape mismatch");
  const std::size_t plane = static_cast<std::size_t>(probs.dim(1)) * probs.dim(2);
  TensorT<T> din(probs.shape);
  const T scale = T(1) / static_cast<T>(plane);
  const std::size_t n = probs.numel();
  const T* p = probs.data.data();
  const T* t = target_probs.data.data();
  T* d = din.data.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
    d[i] = (p[i] - t[i]) * scale;
  return din;
}

// ---------------------------------------------------------------------------
// Serial reference: straight loops, no tiling, no unrolling.

namespace serial {

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& input, const TensorT<T>& weight,
                          const TensorT<T>& bias, const ConvSpec& spec) {
  check_conv_args(input.shape, weight.shape, bias.shape, spec);
  const int cin = input.dim(0), ih = input.dim(1), iw = input.dim(2);
  const int cout = weight.dim(0), k = weight.dim(2);
  const int oh = conv_out_dim(ih, k, spec.stride, spec.dilation, spec.padding);
  const int ow = conv_out_dim(iw, k, spec.stride, spec.dilation, spec.padding);
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: empty output");

  TensorT<T> out({cout, oh, ow});
  for (int co = 0; co < cout; ++co)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        T acc = bias[co];
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * spec.stride - spec.padding + ky * spec.dilation;
              const int ix = ox * spec.stride - spec.padding + kx * spec.dilation;
              if (iy < 0 || iy >= ih || ix < 0 || ix >= iw) continue;
              acc += weight.data[((static_cast<std::size_t>(co) * cin + ci) * k + ky) * k + kx] *
                     input.data[(static_cast<std::size_t>(ci) * ih + iy) * iw + ix];
            }
        out.data[(static_cast<std::size_t>(co) * oh + oy) * ow + ox] = acc;
      }
  return out;
}

template <typename T>
TensorT<T> conv2d_backward_input(const TensorT<T>& grad_out, const TensorT<T>& weight,
                                 int in_h, int in_w, const ConvSpec& spec) {
  const int cout = grad_out.dim(0), oh = grad_out.dim(1), ow = grad_out.dim(2);
  const int cin = weight.dim(1), k = weight.dim(2);
  TensorT<T> din({cin, in_h, in_w});
  for (int co = 0; co < cout; ++co)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const T gv = grad_out.data[(static_cast<std::size_t>(co) * oh + oy) * ow + ox];
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * spec.stride - spec.padding + ky * spec.dilation;
              const int ix = ox * spec.stride - spec.padding + kx * spec.dilation;
              if (iy < 0 || iy >= in_h || ix < 0 || ix >= in_w) continue;
              din.data[(static_cast<std::size_t>(ci) * in_h + iy) * in_w + ix] +=
                  gv *
                  weight.data[((static_cast<std::size_t>(co) * cin + ci) * k + ky) * k + kx];
            }
      }
  return din;
}

template <typename T>
TensorT<T> conv2d_backward_weight(const TensorT<T>& grad_out, const TensorT<T>& input,
                                  int kernel, const ConvSpec& spec) {
  const int cout = grad_out.dim(0), oh = grad_out.dim(1), ow = grad_out.dim(2);
  const int cin = input.dim(0), ih = input.dim(1), iw = input.dim(2);
  const int k = kernel;
  TensorT<T> dw({cout, cin, k, k});
  for (int co = 0; co < cout; ++co)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const T gv = grad_out.data[(static_cast<std::size_t>(co) * oh + oy) * ow + ox];
        for (int ci = 0; ci < cin; ++ci)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * spec.stride - spec.padding + ky * spec.dilation;
              const int ix = ox * spec.stride - spec.padding + kx * spec.dilation;
              if (iy < 0 || iy >= ih || ix < 0 || ix >= iw) continue;
              dw.data[((static_cast<std::size_t>(co) * cin + ci) * k + ky) * k + kx] +=
                  gv * input.data[(static_cast<std::size_t>(ci) * ih + iy) * iw + ix];
            }
      }
  return dw;
}

template <typename T>
TensorT<T> conv2d_backward_bias(const TensorT<T>& grad_out) {
  const int cout = grad_out.dim(0);
  const std::size_t plane = static_cast<std::size_t>(grad_out.dim(1)) * grad_out.dim(2);
  TensorT<T> db({cout});
  for (int co = 0; co < cout; ++co) {
    T s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += grad_out.data[co * plane + i];
    db[co] = s;
  }
  return db;
}

template <typename T>
TensorT<T> relu_forward(const TensorT<T>& input) {
  TensorT<T> out(input.shape);
  for (std::size_t i = 0; i < input.numel(); ++i)
    out.data[i] = input.data[i] > T(0) ? input.data[i] : T(0);
  return out;
}

template <typename T>
TensorT<T> relu_backward(const TensorT<T>& grad_out, const TensorT<T>& input) {
  TensorT<T> out(input.shape);
  for (std::size_t i = 0; i < input.numel(); ++i)
    out.data[i] = input.data[i] > T(0) ? grad_out.data[i] : T(0);
  return out;
}

template <typename T>
TensorT<T> upsample_forward(const TensorT<T>& input, int factor) {
  check_chw(input.shape, "upsample_forward");
  if (factor < 1) throw std::invalid_argument("upsample: factor must be >= 1");
  if (factor == 1) return input;
  const int c = input.dim(0), ih = input.dim(1), iw = input.dim(2);
  const int oh = ih * factor, ow = iw * factor;
  const UpsampleAxis ay(ih, factor), ax(iw, factor);
  TensorT<T> out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const T wy = static_cast<T>(ay.frac[oy]);
        const T wx = static_cast<T>(ax.frac[ox]);
        auto v = [&](int y, int x) {
          return input.data[(static_cast<std::size_t>(ch) * ih + y) * iw + x];
        };
        const T top = (T(1) - wx) * v(ay.i0[oy], ax.i0[ox]) + wx * v(ay.i0[oy], ax.i1[ox]);
        const T bot = (T(1) - wx) * v(ay.i1[oy], ax.i0[ox]) + wx * v(ay.i1[oy], ax.i1[ox]);
        out.data[(static_cast<std::size_t>(ch) * oh + oy) * ow + ox] =
            (T(1) - wy) * top + wy * bot;
      }
  return out;
}

template <typename T>
TensorT<T> upsample_backward(const TensorT<T>& grad_out, int factor, int in_h, int in_w) {
  check_chw(grad_out.shape, "upsample_backward");
  if (factor == 1) return grad_out;
  const int c = grad_out.dim(0), oh = grad_out.dim(1), ow = grad_out.dim(2);
  const UpsampleAxis ay(in_h, factor), ax(in_w, factor);
  TensorT<T> din({c, in_h, in_w});
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const T wy = static_cast<T>(ay.frac[oy]);
        const T wx = static_cast<T>(ax.frac[ox]);
        const T gv = grad_out.data[(static_cast<std::size_t>(ch) * oh + oy) * ow + ox];
        auto d = [&](int y, int x) -> T& {
          return din.data[(static_cast<std::size_t>(ch) * in_h + y) * in_w + x];
        };
        d(ay.i0[oy], ax.i0[ox]) += (T(1) - wy) * (T(1) - wx) * gv;
        d(ay.i0[oy], ax.i1[ox]) += (T(1) - wy) * wx * gv;
        d(ay.i1[oy], ax.i0[ox]) += wy * (T(1) - wx) * gv;
        d(ay.i1[oy], ax.i1[ox]) += wy * wx * gv;
      }
  return din;
}

template <typename T>
TensorT<T> softmax_channel(const TensorT<T>& logits) {
  check_chw(logits.shape, "softmax_channel");
  const int c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  TensorT<T> out(logits.shape);
  for (std::size_t q = 0; q < plane; ++q) {
    T m = logits.data[q];
    for (int k = 1; k < c; ++k) m = std::max(m, logits.data[k * plane + q]);
    T sum = 0;
    for (int k = 0; k < c; ++k) {
      const T e = std::exp(logits.data[k * plane + q] - m);
      out.data[k * plane + q] = e;
      sum += e;
    }
    for (int k = 0; k < c; ++k) out.data[k * plane + q] /= sum;
  }
  return out;
}

template <typename T>
T cross_entropy(const TensorT<T>& logits, const LabelMap& labels, TensorT<T>* probs_out) {
  check_chw(logits.shape, "cross_entropy");
  const int c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  check_labels(labels, c, h, w);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  if (probs_out) *probs_out = TensorT<T>(logits.shape);
  T total = 0;
  std::int64_t n = 0;
  for (std::size_t q = 0; q < plane; ++q) {
    T m = logits.data[q];
    for (int k = 1; k < c; ++k) m = std::max(m, logits.data[k * plane + q]);
    T sum = 0;
    for (int k = 0; k < c; ++k) sum += std::exp(logits.data[k * plane + q] - m);
    const T lse = m + std::log(sum);
    if (probs_out)
      for (int k = 0; k < c; ++k)
        probs_out->data[k * plane + q] = std::exp(logits.data[k * plane + q] - lse);
    const std::uint8_t lab = labels.v[q];
    if (lab == kIgnoreLabel) continue;
    total += lse - logits.data[static_cast<std::size_t>(lab) * plane + q];
    ++n;
  }
  return n == 0 ? T(0) : total / static_cast<T>(n);
}

template <typename T>
T kl_divergence(const TensorT<T>& target_probs, const TensorT<T>& logits,
                TensorT<T>* probs_out) {
  check_chw(logits.shape, "kl_divergence");
  if (!target_probs.same_shape(logits))
    throw std::invalid_argument("kl_divergence: target/logits shape mismatch");
  const int c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  check_target_probs(target_probs, c, plane);
  if (probs_out) *probs_out = TensorT<T>(logits.shape);
  T total = 0;
  for (std::size_t q = 0; q < plane; ++q) {
    T m = logits.data[q];
    for (int k = 1; k < c; ++k) m = std::max(m, logits.data[k * plane + q]);
    T sum = 0;
    for (int k = 0; k < c; ++k) sum += std::exp(logits.data[k * plane + q] - m);
    const T lse = m + std::log(sum);
    T pix = 0;
    for (int k = 0; k < c; ++k) {
      const T pt = target_probs.data[k * plane + q];
      const T logps = logits.data[k * plane + q] - lse;
      if (probs_out) probs_out->data[k * plane + q] = std::exp(logps);
      if (pt > T(0)) pix += pt * (std::log(pt) - logps);
    }
    total += std::max(pix, T(0));
  }
  return total / static_cast<T>(plane);
}

#define DMX_INSTANTIATE_SERIAL(T)                                                           \
  template TensorT<T> conv2d_forward<T>(const TensorT<T>&, const TensorT<T>&,              \
                                        const TensorT<T>&, const ConvSpec&);               \
  template TensorT<T> conv2d_backward_input<T>(const TensorT<T>&, const TensorT<T>&, int,  \
                                               int, const ConvSpec&);                      \
  template TensorT<T> conv2d_backward_weight<T>(const TensorT<T>&, const TensorT<T>&, int, \
                                                const ConvSpec&);                          \
  template TensorT<T> conv2d_backward_bias<T>(const TensorT<T>&);                          \
  template TensorT<T> relu_forward<T>(const TensorT<T>&);                                  \
  template TensorT<T> relu_backward<T>(const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> upsample_forward<T>(const TensorT<T>&, int);                         \
  template TensorT<T> upsample_backward<T>(const TensorT<T>&, int, int, int);              \
  template TensorT<T> softmax_channel<T>(const TensorT<T>&);                               \
  template T cross_entropy<T>(const TensorT<T>&, const LabelMap&, TensorT<T>*);            \
  template T kl_divergence<T>(const TensorT<T>&, const TensorT<T>&, TensorT<T>*);

DMX_INSTANTIATE_SERIAL(float)
DMX_INSTANTIATE_SERIAL(double)
#undef DMX_INSTANTIATE_SERIAL

}  // namespace serial

#define DMX_INSTANTIATE(T)                                                                  \
  template TensorT<T> conv2d_forward<T>(const TensorT<T>&, const TensorT<T>&,              \
                                        const TensorT<T>&, const ConvSpec&);               \
  template TensorT<T> conv2d_backward_input<T>(const TensorT<T>&, const TensorT<T>&, int,  \
                                               int, const ConvSpec&);                      \
  template TensorT<T> conv2d_backward_weight<T>(const TensorT<T>&, const TensorT<T>&, int, \
                                                const ConvSpec&);                          \
  template TensorT<T> conv2d_backward_bias<T>(const TensorT<T>&);                          \
  template TensorT<T> relu_forward<T>(const TensorT<T>&);                                  \
  template TensorT<T> relu_backward<T>(const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> upsample_forward<T>(const TensorT<T>&, int);                         \
  template TensorT<T> upsample_backward<T>(const TensorT<T>&, int, int, int);              \
  template TensorT<T> softmax_channel<T>(const TensorT<T>&);                               \
  template TensorT<T> softmax_backward<T>(const TensorT<T>&, const TensorT<T>&);           \
  template T cross_entropy<T>(const TensorT<T>&, const LabelMap&, TensorT<T>*);            \
  template TensorT<T> cross_entropy_grad<T>(const TensorT<T>&, const LabelMap&);           \
  template T kl_divergence<T>(const TensorT<T>&, const TensorT<T>&, TensorT<T>*);          \
  template TensorT<T> kl_divergence_grad<T>(const TensorT<T>&, const TensorT<T>&);

DMX_INSTANTIATE(float)
DMX_INSTANTIATE(double)
#undef DMX_INSTANTIATE

}  // namespace dmx::kernels
