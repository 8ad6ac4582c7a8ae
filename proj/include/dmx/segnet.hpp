#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dmx/autodiff.hpp"
#include "dmx/tensor.hpp"

namespace dmx {

enum class Role { teacher_rl, teacher_sl, student };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::teacher_rl: return "teacher_RL";
    case Role::teacher_sl: return "teacher_SL";
    default: return "student";
  }
}

// Fixed fully-convolutional net: stem1 3->16 (pad 1), stem2 16->32
// (stride 2, pad 1), three parallel dilated 3x3 convs (dilation 1/2/4)
// summed, 1x1 head, bilinear x2 back to input resolution. No normalization
// layers, so the forward pass has no cross-sample state.
template <typename T>
struct ModelParamsT {
  TensorT<T> stem1_w, stem1_b;
  TensorT<T> stem2_w, stem2_b;
  TensorT<T> aspp1_w, aspp1_b;
  TensorT<T> aspp2_w, aspp2_b;
  TensorT<T> aspp4_w, aspp4_b;
  TensorT<T> head_w, head_b;
  Role role = Role::student;
  int num_classes = 0;

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("stem1.weight", stem1_w);
    fn("stem1.bias", stem1_b);
    fn("stem2.weight", stem2_w);
    fn("stem2.bias", stem2_b);
    fn("aspp_d1.weight", aspp1_w);
    fn("aspp_d1.bias", aspp1_b);
    fn("aspp_d2.weight", aspp2_w);
    fn("aspp_d2.bias", aspp2_b);
    fn("aspp_d4.weight", aspp4_w);
    fn("aspp_d4.bias", aspp4_b);
    fn("head.weight", head_w);
    fn("head.bias", head_b);
  }
  template <typename Fn>
  void visit(Fn&& fn) const {
    const_cast<ModelParamsT*>(this)->visit(
        [&](const char* name, const TensorT<T>& t) { fn(name, t); });
  }

  std::vector<TensorT<T>*> tensors() {
    std::vector<TensorT<T>*> out;
    visit([&](const char*, TensorT<T>& t) { out.push_back(&t); });
    return out;
  }
  std::vector<const TensorT<T>*> tensors() const {
    std::vector<const TensorT<T>*> out;
    visit([&](const char*, const TensorT<T>& t) { out.push_back(&t); });
    return out;
  }
};

using ModelParams = ModelParamsT<float>;

// He-normal weights, zero biases, bitwise deterministic per seed.
ModelParams init_model(std::uint64_t seed, int num_classes, Role role = Role::student);

std::size_t param_count(int num_classes);

template <typename To, typename From>
ModelParamsT<To> params_cast(const ModelParamsT<From>& p) {
  ModelParamsT<To> out;
  out.role = p.role;
  out.num_classes = p.num_classes;
  auto src = p.tensors();
  auto dst = out.tensors();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = tensor_cast<To>(*src[i]);
  return out;
}

// Inference path, no tape. Input (3,H,W) in [0,1], H and W even and >= 8;
// output (C,H,W) logits.
template <typename T>
TensorT<T> forward(const ModelParamsT<T>& params, const TensorT<T>& image);

template <typename T>
struct ModelVarsT {
  using Var = typename Tape<T>::Var;
  Var stem1_w, stem1_b, stem2_w, stem2_b;
  Var aspp1_w, aspp1_b, aspp2_w, aspp2_b, aspp4_w, aspp4_b;
  Var head_w, head_b;

  std::vector<Var> all() const {
    return {stem1_w, stem1_b, stem2_w, stem2_b, aspp1_w, aspp1_b,
            aspp2_w, aspp2_b, aspp4_w, aspp4_b, head_w,  head_b};
  }
};

template <typename T>
ModelVarsT<T> make_model_vars(Tape<T>& tape, const ModelParamsT<T>& params);

template <typename T>
typename Tape<T>::Var forward_on_tape(Tape<T>& tape, const ModelVarsT<T>& vars,
                                      typename Tape<T>::Var image);

// DMCK checkpoint: "DMCK", u32 version=1, u32 tensor count; per tensor
// u16 name length, name, u8 ndim, u32 dims..., f32 data. Little-endian.
// Loading verifies names and shapes against the fixed architecture.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

extern template TensorT<float> forward<float>(const ModelParamsT<float>&, const TensorT<float>&);
extern template TensorT<double> forward<double>(const ModelParamsT<double>&,
                                                const TensorT<double>&);
extern template ModelVarsT<float> make_model_vars<float>(Tape<float>&,
                                                         const ModelParamsT<float>&);
extern template ModelVarsT<double> make_model_vars<double>(Tape<double>&,
                                                           const ModelParamsT<double>&);
extern template Tape<float>::Var forward_on_tape<float>(Tape<float>&, const ModelVarsT<float>&,
                                                        Tape<float>::Var);
extern template Tape<double>::Var forward_on_tape<double>(Tape<double>&,
                                                          const ModelVarsT<double>&,
                                                          Tape<double>::Var);

}  // namespace dmx
