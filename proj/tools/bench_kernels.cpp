// Compares the OpenMP kernels against the serial reference at the network's
// working shapes, then times a full forward/backward training step.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>

#include <omp.h>

#include "dmx/autodiff.hpp"
#include "dmx/kernels.hpp"
#include "dmx/label_map.hpp"
#include "dmx/rng.hpp"
#include "dmx/segnet.hpp"

namespace K = dmx::kernels;
using dmx::Tensor;

namespace {

Tensor random_tensor(std::vector<int> shape, dmx::Rng& rng) {
  Tensor t(std::move(shape));
  for (float& v : t.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

template <typename Fn>
double time_ms(int reps, Fn&& fn) {
  fn();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

struct ConvCase {
  const char* name;
  std::vector<int> in_shape;
  std::vector<int> w_shape;
  K::ConvSpec spec;
};

void bench_conv(const ConvCase& c, int reps, dmx::Rng& rng) {
  const Tensor in = random_tensor(c.in_shape, rng);
  const Tensor w = random_tensor(c.w_shape, rng);
  const Tensor b = random_tensor({c.w_shape[0]}, rng);
  const Tensor out = K::conv2d_forward(in, w, b, c.spec);

  const double fwd_s = time_ms(reps, [&] { K::serial::conv2d_forward(in, w, b, c.spec); });
  const double fwd_p = time_ms(reps, [&] { K::conv2d_forward(in, w, b, c.spec); });
  const double bwi_s = time_ms(
      reps, [&] { K::serial::conv2d_backward_input(out, w, c.in_shape[1], c.in_shape[2], c.spec); });
  const double bwi_p =
      time_ms(reps, [&] { K::conv2d_backward_input(out, w, c.in_shape[1], c.in_shape[2], c.spec); });
  const double bww_s =
      time_ms(reps, [&] { K::serial::conv2d_backward_weight(out, in, c.w_shape[2], c.spec); });
  const double bww_p = time_ms(reps, [&] { K::conv2d_backward_weight(out, in, c.w_shape[2], c.spec); });

  std::printf("%-22s fwd %8.3f / %8.3f ms (x%.1f)   dIn %8.3f / %8.3f ms (x%.1f)   dW %8.3f / %8.3f ms (x%.1f)\n",
              c.name, fwd_s, fwd_p, fwd_s / fwd_p, bwi_s, bwi_p, bwi_s / bwi_p, bww_s, bww_p,
              bww_s / bww_p);
}

}  // namespace

int main(int argc, char** argv) {
  int reps = 20;
  for (int i = 1; i < argc; ++i)
    if (std::strcmp(argv[i], "--reps") == 0 && i + 1 < argc) reps = std::atoi(argv[++i]);

  std::printf("threads: %d   (serial / OpenMP, speedup)\n", omp_get_max_threads());
  dmx::Rng rng(7);

  const ConvCase cases[] = {
      {"stem1 3>16 64x64", {3, 64, 64}, {16, 3, 3, 3}, {1, 1, 1}},
      {"stem2 16>32 s2", {16, 64, 64}, {32, 16, 3, 3}, {2, 1, 1}},
      {"aspp 32>32 d1", {32, 32, 32}, {32, 32, 3, 3}, {1, 1, 1}},
      {"aspp 32>32 d4", {32, 32, 32}, {32, 32, 3, 3}, {1, 4, 4}},
      {"head 32>5 1x1", {32, 32, 32}, {5, 32, 1, 1}, {1, 1, 0}},
  };
  for (const ConvCase& c : cases) bench_conv(c, reps, rng);

  {
    const Tensor logits = random_tensor({5, 64, 64}, rng);
    const double sm_s = time_ms(reps * 10, [&] { K::serial::softmax_channel(logits); });
    const double sm_p = time_ms(reps * 10, [&] { K::softmax_channel(logits); });
    const Tensor half = random_tensor({5, 32, 32}, rng);
    const double up_s = time_ms(reps * 10, [&] { K::serial::upsample_forward(half, 2); });
    const double up_p = time_ms(reps * 10, [&] { K::upsample_forward(half, 2); });
    std::printf("%-22s     %8.3f / %8.3f ms (x%.1f)\n", "softmax 5x64x64", sm_s, sm_p,
                sm_s / sm_p);
    std::printf("%-22s     %8.3f / %8.3f ms (x%.1f)\n", "upsample x2", up_s, up_p, up_s / up_p);
  }

  // Full training step at the real shapes.
  const dmx::ModelParams params = dmx::init_model(1, 5);
  const Tensor img = random_tensor({3, 64, 64}, rng);
  dmx::LabelMap labels(64, 64);
  for (std::size_t i = 0; i < labels.v.size(); ++i)
    labels.v[i] = static_cast<std::uint8_t>(i % 5);

  const double step_ms = time_ms(reps, [&] {
    dmx::Tape<float> tape;
    const auto vars = dmx::make_model_vars(tape, params);
    auto logits = dmx::forward_on_tape(tape, vars, tape.constant(img));
    tape.backward(tape.cross_entropy(logits, labels));
  });
  std::printf("full fwd+bwd step: %.3f ms  (%.1f iters/s)\n", step_ms, 1000.0 / step_ms);
  return 0;
}
