#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dmx/autodiff.hpp"
#include "dmx/kernels.hpp"
#include "dmx/optim.hpp"
#include "dmx/rng.hpp"
#include "testutil.hpp"

using namespace dmx;
namespace K = kernels;
using dmxtest::fd_check_tensor;
using dmxtest::random_tensor;
using dmxtest::rel_err;

TEST_CASE("conv2d identity kernel") {
  Tensor in({1, 3, 3});
  for (int i = 0; i < 9; ++i) in.data[i] = static_cast<float>(i + 1);
  const Tensor w({1, 1, 1, 1}, 1.f);
  const Tensor b({1}, 0.f);
  const Tensor out = K::conv2d_forward(in, w, b, {1, 1, 0});
  CHECK(out.shape == in.shape);
  for (int i = 0; i < 9; ++i) CHECK(out.data[i] == doctest::Approx(in.data[i]));
}

TEST_CASE("conv2d all-ones 3x3 hand cross-correlation") {
  // 3x3 input [[1,2,0],[3,4,0],[0,0,0]], all-ones kernel, padding 1:
  // center output = 1+2+3+4 = 10.
  Tensor in({1, 3, 3}, 0.f);
  in.data[0] = 1;
  in.data[1] = 2;
  in.data[3] = 3;
  in.data[4] = 4;
  const Tensor w({1, 1, 3, 3}, 1.f);
  const Tensor b({1}, 0.f);
  const Tensor out = K::conv2d_forward(in, w, b, {1, 1, 1});
  CHECK(out.dim(1) == 3);
  CHECK(out.at3(0, 1, 1) == doctest::Approx(10.f));
  // full hand oracle for the remaining positions
  const float expect[9] = {10, 10, 6, 10, 10, 6, 7, 7, 4};
  for (int i = 0; i < 9; ++i) CHECK(out.data[i] == doctest::Approx(expect[i]));
}

TEST_CASE("conv2d rejects bad shapes") {
  const Tensor in({2, 4, 4}, 0.f);
  const Tensor w({1, 3, 3, 3}, 0.f);  // Cin mismatch
  const Tensor b({1}, 0.f);
  CHECK_THROWS_AS(K::conv2d_forward(in, w, b, {1, 1, 1}), std::invalid_argument);
  const Tensor weven({1, 2, 2, 2}, 0.f);
  const Tensor in2({2, 4, 4}, 0.f);
  CHECK_THROWS_AS(K::conv2d_forward(in2, weven, b, {1, 1, 0}), std::invalid_argument);
}

TEST_CASE("relu basics") {
  Tensor in({3}, 0.f);
  in.data = {-1.f, 0.f, 2.f};
  const Tensor out = K::relu_forward(in);
  CHECK(out.data[0] == 0.f);
  CHECK(out.data[1] == 0.f);
  CHECK(out.data[2] == 2.f);

  Tensor neg({2, 2, 2}, -3.f);
  const Tensor z = K::relu_forward(neg);
  for (float v : z.data) CHECK(v == 0.f);

  // mask = indicator(x > 0); the subgradient at 0 is 0
  Tensor g({3}, 1.f);
  const Tensor back = K::relu_backward(g, in);
  CHECK(back.data[0] == 0.f);
  CHECK(back.data[1] == 0.f);
  CHECK(back.data[2] == 1.f);
}

TEST_CASE("bilinear upsample closed-form values") {
  Tensor in({1, 1, 2});
  in.data = {0.f, 1.f};
  const Tensor out = K::upsample_forward(in, 2);
  REQUIRE(out.numel() == 8);
  const float expect[4] = {0.f, 0.25f, 0.75f, 1.f};
  for (int i = 0; i < 4; ++i) CHECK(out.data[i] == doctest::Approx(expect[i]).epsilon(1e-6));

  // factor 1 is the identity
  const Tensor same = K::upsample_forward(in, 1);
  CHECK(same.data == in.data);

  // constant input stays constant
  Tensor c({2, 3, 4}, 1.5f);
  const Tensor cu = K::upsample_forward(c, 3);
  CHECK(cu.dim(1) == 9);
  for (float v : cu.data) CHECK(v == doctest::Approx(1.5f));
}

TEST_CASE("softmax_channel values and invariants") {
  Tensor logits({5, 1, 1}, 0.7f);
  const Tensor p = K::softmax_channel(logits);
  for (int c = 0; c < 5; ++c) CHECK(p.data[c] == doctest::Approx(0.2).epsilon(1e-6));

  Tensor l3({3, 1, 1});
  l3.data = {std::log(1.f), std::log(2.f), std::log(3.f)};
  const Tensor p3 = K::softmax_channel(l3);
  CHECK(p3.data[0] == doctest::Approx(1.0 / 6));
  CHECK(p3.data[1] == doctest::Approx(2.0 / 6));
  CHECK(p3.data[2] == doctest::Approx(3.0 / 6));

  // shift invariance + sums to one on random logits
  Rng rng(11);
  Tensor a = dmxtest::random_tensor_f({4, 6, 6}, rng, -8, 8);
  Tensor shifted = a;
  const std::size_t plane = 36;
  for (std::size_t q = 0; q < plane; ++q)
    for (int c = 0; c < 4; ++c) shifted.data[c * plane + q] += 3.25f;
  const Tensor pa = K::softmax_channel(a);
  const Tensor pb = K::softmax_channel(shifted);
  for (std::size_t i = 0; i < pa.numel(); ++i)
    CHECK(std::abs(pa.data[i] - pb.data[i]) < 1e-6f);
  for (std::size_t q = 0; q < plane; ++q) {
    float s = 0;
    for (int c = 0; c < 4; ++c) {
      s += pa.data[c * plane + q];
      CHECK(pa.data[c * plane + q] > 0.f);
    }
    CHECK(std::abs(s - 1.f) < 1e-6f);
  }
}

TEST_CASE("cross_entropy closed forms") {
  Tensor logits({5, 1, 1}, 0.f);
  LabelMap lab(1, 1, 2);
  CHECK(K::cross_entropy(logits, lab) == doctest::Approx(std::log(5.0)).epsilon(1e-6));

  LabelMap ign(1, 1, kIgnoreLabel);
  CHECK(K::cross_entropy(logits, ign) == 0.f);

  Tensor confident({5, 1, 1}, 0.f);
  confident.data[2] = 20.f;
  CHECK(K::cross_entropy(confident, lab) < 1e-8f);

  LabelMap bad(1, 1, 7);
  CHECK_THROWS_AS(K::cross_entropy(logits, bad), std::invalid_argument);
}

TEST_CASE("cross_entropy shift invariance") {
  Rng rng(5);
  const Tensor a = dmxtest::random_tensor_f({5, 4, 4}, rng, -4, 4);
  Tensor shifted = a;
  for (std::size_t q = 0; q < 16; ++q)
    for (int c = 0; c < 5; ++c) shifted.data[c * 16 + q] -= 1.75f;
  const LabelMap lab = dmxtest::random_labels(4, 4, 5, rng);
  CHECK(std::abs(K::cross_entropy(a, lab) - K::cross_entropy(shifted, lab)) < 1e-6f);
}

TEST_CASE("kl_divergence closed forms and validation") {
  // target equals student softmax -> 0
  Rng rng(3);
  const Tensor logits = dmxtest::random_tensor_f({4, 3, 3}, rng, -3, 3);
  const Tensor self = K::softmax_channel(logits);
  CHECK(K::kl_divergence(self, logits) < 1e-6f);

  // single pixel, target [1,0], logits [0,0] -> ln 2
  Tensor t({2, 1, 1});
  t.data = {1.f, 0.f};
  Tensor l({2, 1, 1}, 0.f);
  CHECK(K::kl_divergence(t, l) == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  // analytic gradient (p_s - p_t) / num_pixels
  Tensor probs;
  K::kl_divergence(t, l, &probs);
  const Tensor g = K::kl_divergence_grad(probs, t);
  CHECK(g.data[0] == doctest::Approx(-0.5).epsilon(1e-6));
  CHECK(g.data[1] == doctest::Approx(0.5).epsilon(1e-6));

  Tensor negative({2, 1, 1});
  negative.data = {1.5f, -0.5f};
  CHECK_THROWS_AS(K::kl_divergence(negative, l), std::invalid_argument);
  Tensor off({2, 1, 1});
  off.data = {0.6f, 0.6f};
  CHECK_THROWS_AS(K::kl_divergence(off, l), std::invalid_argument);
}

TEST_CASE("kl nonnegative on random valid inputs") {
  Rng rng(17);
  for (int i = 0; i < 50; ++i) {
    const Tensor logits = dmxtest::random_tensor_f({5, 4, 4}, rng, -5, 5);
    const Tensor target = K::softmax_channel(dmxtest::random_tensor_f({5, 4, 4}, rng, -5, 5));
    CHECK(K::kl_divergence(target, logits) >= 0.f);
  }
}

TEST_CASE("tape: sum gradient is ones, scale by zero kills gradients") {
  Tape<float> tape;
  auto p = tape.leaf(Tensor({3, 2, 2}, 2.f));
  auto s = tape.sum(p);
  tape.backward(s);
  for (float v : tape.grad(p).data) CHECK(v == 1.f);

  Tape<float> tape2;
  auto q = tape2.leaf(Tensor({2, 2, 2}, 3.f));
  auto z = tape2.scale(tape2.sum(q), 0.f);
  tape2.backward(z);
  for (float v : tape2.grad(q).data) CHECK(v == 0.f);
}

TEST_CASE("tape: unreachable parameters get zero gradient") {
  Tape<float> tape;
  auto used = tape.leaf(Tensor({2}, 1.f));
  auto unused = tape.leaf(Tensor({4}, 1.f));
  tape.backward(tape.sum(used));
  for (float v : tape.grad(unused).data) CHECK(v == 0.f);
}

TEST_CASE("tape: backward twice without reset is rejected") {
  Tape<float> tape;
  auto p = tape.leaf(Tensor({2}, 1.f));
  auto s = tape.sum(p);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), std::logic_error);
  tape.reset();
  auto p2 = tape.leaf(Tensor({2}, 1.f));
  CHECK_NOTHROW(tape.backward(tape.sum(p2)));
}

TEST_CASE("tape: gradient accumulates over multiple consumers") {
  Tape<float> tape;
  auto p = tape.leaf(Tensor({4}, 1.5f));
  auto twice = tape.add(p, p);
  tape.backward(tape.sum(twice));
  for (float v : tape.grad(p).data) CHECK(v == 2.f);
}

// Finite-difference checks run in the 64-bit shadow mode.
namespace {

struct Probe {
  TensorD weights;  // fixed random projection so every output matters
  double operator()(const TensorD& out) const {
    double s = 0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += weights.data[i] * out.data[i];
    return s;
  }
};

Probe make_probe(const std::vector<int>& shape, Rng& rng) {
  return Probe{random_tensor(shape, rng)};
}

}  // namespace

TEST_CASE("finite differences: conv2d gradients (weight, bias, input)") {
  Rng rng(101);
  for (const auto& [spec, ih, iw, cin, cout, k] :
       {std::tuple{K::ConvSpec{1, 1, 1}, 6, 7, 2, 3, 3}, std::tuple{K::ConvSpec{2, 1, 1}, 8, 8, 3, 2, 3},
        std::tuple{K::ConvSpec{1, 2, 2}, 8, 6, 2, 2, 3}, std::tuple{K::ConvSpec{1, 1, 0}, 5, 5, 3, 2, 1}}) {
    TensorD in = random_tensor({cin, ih, iw}, rng);
    TensorD w = random_tensor({cout, cin, k, k}, rng);
    TensorD b = random_tensor({cout}, rng);
    const int oh = K::conv_out_dim(ih, k, spec.stride, spec.dilation, spec.padding);
    const int ow = K::conv_out_dim(iw, k, spec.stride, spec.dilation, spec.padding);
    const Probe probe = make_probe({cout, oh, ow}, rng);

    auto loss = [&] { return probe(K::conv2d_forward(in, w, b, spec)); };

    // analytic grads via the backward kernels with dL/dout = probe.weights
    const TensorD dw = K::conv2d_backward_weight(probe.weights, in, k, spec);
    const TensorD db = K::conv2d_backward_bias(probe.weights);
    const TensorD din = K::conv2d_backward_input(probe.weights, w, ih, iw, spec);

    CHECK(fd_check_tensor(w, dw, loss).max_rel_err < 1e-4);
    CHECK(fd_check_tensor(b, db, loss).max_rel_err < 1e-4);
    CHECK(fd_check_tensor(in, din, loss).max_rel_err < 1e-4);
  }
}

TEST_CASE("finite differences: relu away from zero") {
  Rng rng(7);
  TensorD in = random_tensor({3, 5, 5}, rng);
  for (double& v : in.data)
    if (std::abs(v) < 0.05) v = 0.1;  // keep probes off the kink
  const Probe probe = make_probe(in.shape, rng);
  auto loss = [&] { return probe(K::relu_forward(in)); };
  const TensorD analytic = K::relu_backward(probe.weights, in);
  CHECK(fd_check_tensor(in, analytic, loss).max_rel_err < 1e-4);
}

TEST_CASE("finite differences: bilinear upsample") {
  Rng rng(13);
  TensorD in = random_tensor({2, 4, 5}, rng);
  const Probe probe = make_probe({2, 8, 10}, rng);
  auto loss = [&] { return probe(K::upsample_forward(in, 2)); };
  const TensorD analytic = K::upsample_backward(probe.weights, 2, 4, 5);
  CHECK(fd_check_tensor(in, analytic, loss).max_rel_err < 1e-4);
}

TEST_CASE("finite differences: softmax backward") {
  Rng rng(19);
  TensorD in = random_tensor({4, 3, 3}, rng, -2, 2);
  const Probe probe = make_probe(in.shape, rng);
  auto loss = [&] { return probe(K::softmax_channel(in)); };
  const TensorD probs = K::softmax_channel(in);
  const TensorD analytic = K::softmax_backward(probs, probe.weights);
  CHECK(fd_check_tensor(in, analytic, loss).max_rel_err < 1e-4);
}

TEST_CASE("finite differences: cross entropy and KL") {
  Rng rng(23);
  TensorD logits = random_tensor({5, 4, 4}, rng, -2, 2);
  const LabelMap labels = dmxtest::random_labels(4, 4, 5, rng);
  auto ce_loss = [&] { return static_cast<double>(K::cross_entropy(logits, labels)); };
  TensorD probs;
  K::cross_entropy(logits, labels, &probs);
  CHECK(fd_check_tensor(logits, K::cross_entropy_grad(probs, labels), ce_loss).max_rel_err <
        1e-4);

  const TensorD target = K::softmax_channel(random_tensor({5, 4, 4}, rng, -2, 2));
  auto kl_loss = [&] { return static_cast<double>(K::kl_divergence(target, logits)); };
  TensorD sprobs;
  K::kl_divergence(target, logits, &sprobs);
  CHECK(fd_check_tensor(logits, K::kl_divergence_grad(sprobs, target), kl_loss).max_rel_err <
        1e-4);
}

TEST_CASE("finite differences: composite conv-relu-CE graph via tape") {
  Rng rng(29);
  TensorD in = random_tensor({2, 6, 6}, rng);
  TensorD w1 = random_tensor({4, 2, 3, 3}, rng, -0.6, 0.6);
  TensorD b1 = random_tensor({4}, rng, -0.1, 0.1);
  TensorD w2 = random_tensor({3, 4, 1, 1}, rng, -0.6, 0.6);
  TensorD b2 = random_tensor({3}, rng, -0.1, 0.1);
  const LabelMap labels = dmxtest::random_labels(6, 6, 3, rng);

  auto loss = [&] {
    namespace KS = K::serial;
    const TensorD h = KS::relu_forward(KS::conv2d_forward(in, w1, b1, {1, 1, 1}));
    return static_cast<double>(
        KS::cross_entropy(KS::conv2d_forward(h, w2, b2, {1, 1, 0}), labels));
  };

  Tape<double> tape;
  auto vin = tape.constant(in);
  auto vw1 = tape.leaf(w1), vb1 = tape.leaf(b1);
  auto vw2 = tape.leaf(w2), vb2 = tape.leaf(b2);
  auto h = tape.relu(tape.conv2d(vin, vw1, vb1, {1, 1, 1}));
  auto out = tape.conv2d(h, vw2, vb2, {1, 1, 0});
  tape.backward(tape.cross_entropy(out, labels));

  CHECK(fd_check_tensor(w1, tape.grad(vw1), loss).max_rel_err < 1e-4);
  CHECK(fd_check_tensor(b1, tape.grad(vb1), loss).max_rel_err < 1e-4);
  CHECK(fd_check_tensor(w2, tape.grad(vw2), loss).max_rel_err < 1e-4);
  CHECK(fd_check_tensor(b2, tape.grad(vb2), loss).max_rel_err < 1e-4);
}

TEST_CASE("poly_lr schedule") {
  OptimizerState st;
  st.base_lr = 2.5e-4f;
  st.power = 0.9f;
  st.max_iter = 1000;
  CHECK(poly_lr(0, st) == doctest::Approx(2.5e-4));
  CHECK(poly_lr(1000, st) == doctest::Approx(0.0));
  CHECK(poly_lr(500, st) == doctest::Approx(1.3397e-4).epsilon(1e-4));
  CHECK_THROWS_AS(poly_lr(1001, st), std::invalid_argument);
}

TEST_CASE("sgd_step recurrences") {
  // vanilla step: p <- p - lr*g
  Tensor p({2}, 1.f);
  Tensor g({2}, 0.5f);
  OptimizerState st = make_optimizer({&p}, 0.1f, 0.f, 0.f, 0.f, 100);
  // power 0 keeps lr constant at base_lr
  sgd_step({&p}, {&g}, st);
  CHECK(p.data[0] == doctest::Approx(1.f - 0.1f * 0.5f));

  // momentum hand recurrence: p=1, g=1, momentum .9 -> p = 0.71 after 2 steps
  Tensor p2({1}, 1.f);
  Tensor g2({1}, 1.f);
  OptimizerState st2 = make_optimizer({&p2}, 0.1f, 0.9f, 0.f, 0.f, 100);
  sgd_step({&p2}, {&g2}, st2);
  sgd_step({&p2}, {&g2}, st2);
  CHECK(p2.data[0] == doctest::Approx(0.71f).epsilon(1e-6));

  // zero gradient, zero velocity, zero wd -> unchanged
  Tensor p3({3}, 2.f);
  Tensor g3({3}, 0.f);
  OptimizerState st3 = make_optimizer({&p3}, 0.1f, 0.9f, 0.f, 0.9f, 10);
  sgd_step({&p3}, {&g3}, st3);
  for (float v : p3.data) CHECK(v == 2.f);
  CHECK(st3.iter == 1);
}

TEST_CASE("sgd_step applies weight decay through the velocity") {
  Tensor p({1}, 2.f);
  Tensor g({1}, 0.f);
  OptimizerState st = make_optimizer({&p}, 0.1f, 0.f, 0.01f, 0.f, 10);
  sgd_step({&p}, {&g}, st);
  // v = wd*p = 0.02, p = 2 - 0.1*0.02
  CHECK(p.data[0] == doctest::Approx(2.f - 0.1f * 0.02f));
}

TEST_CASE("parallel kernels match the serial reference") {
  Rng rng(41);
  for (const auto& [spec, ih, iw, cin, cout, k] :
       {std::tuple{K::ConvSpec{1, 1, 1}, 16, 16, 3, 8, 3},
        std::tuple{K::ConvSpec{2, 1, 1}, 16, 16, 8, 8, 3},
        std::tuple{K::ConvSpec{1, 4, 4}, 12, 12, 4, 4, 3},
        std::tuple{K::ConvSpec{1, 2, 2}, 9, 11, 2, 3, 5}}) {
    const Tensor in = dmxtest::random_tensor_f({cin, ih, iw}, rng);
    const Tensor w = dmxtest::random_tensor_f({cout, cin, k, k}, rng);
    const Tensor b = dmxtest::random_tensor_f({cout}, rng);
    const Tensor a = K::conv2d_forward(in, w, b, spec);
    const Tensor s = K::serial::conv2d_forward(in, w, b, spec);
    REQUIRE(a.shape == s.shape);
    CHECK(dmxtest::scaled_max_diff(a, s) < 1e-5);

    const Tensor din_p = K::conv2d_backward_input(a, w, ih, iw, spec);
    const Tensor din_s = K::serial::conv2d_backward_input(a, w, ih, iw, spec);
    CHECK(dmxtest::scaled_max_diff(din_p, din_s) < 1e-5);

    const Tensor dw_p = K::conv2d_backward_weight(a, in, k, spec);
    const Tensor dw_s = K::serial::conv2d_backward_weight(a, in, k, spec);
    CHECK(dmxtest::scaled_max_diff(dw_p, dw_s) < 1e-5);
  }

  const Tensor x = dmxtest::random_tensor_f({6, 10, 10}, rng, -4, 4);
  const Tensor sm_p = K::softmax_channel(x);
  const Tensor sm_s = K::serial::softmax_channel(x);
  for (std::size_t i = 0; i < x.numel(); ++i)
    CHECK(std::abs(sm_p.data[i] - sm_s.data[i]) < 1e-6f);

  const Tensor up_p = K::upsample_forward(x, 3);
  const Tensor up_s = K::serial::upsample_forward(x, 3);
  CHECK(up_p.data == up_s.data);

  const LabelMap lab = dmxtest::random_labels(10, 10, 6, rng);
  CHECK(rel_err(K::cross_entropy(x, lab), K::serial::cross_entropy(x, lab)) < 1e-5);
  const Tensor tgt = K::softmax_channel(dmxtest::random_tensor_f({6, 10, 10}, rng));
  CHECK(rel_err(K::kl_divergence(tgt, x), K::serial::kl_divergence(tgt, x)) < 1e-5);
}

TEST_CASE("determinism: identical inputs give bitwise-identical outputs") {
  Rng rng(53);
  const Tensor in = dmxtest::random_tensor_f({8, 16, 16}, rng);
  const Tensor w = dmxtest::random_tensor_f({8, 8, 3, 3}, rng);
  const Tensor b = dmxtest::random_tensor_f({8}, rng);
  const Tensor o1 = K::conv2d_forward(in, w, b, {1, 2, 2});
  const Tensor o2 = K::conv2d_forward(in, w, b, {1, 2, 2});
  CHECK(o1.data == o2.data);
  const Tensor g1 = K::conv2d_backward_weight(o1, in, 3, {1, 2, 2});
  const Tensor g2 = K::conv2d_backward_weight(o1, in, 3, {1, 2, 2});
  CHECK(g1.data == g2.data);
}

TEST_CASE("all documented ops keep finite values finite") {
  Rng rng(59);
  const Tensor in = dmxtest::random_tensor_f({4, 8, 8}, rng, -50, 50);
  CHECK(K::softmax_channel(in).all_finite());
  CHECK(K::relu_forward(in).all_finite());
  CHECK(K::upsample_forward(in, 2).all_finite());
  const LabelMap lab = dmxtest::random_labels(8, 8, 4, rng);
  CHECK(std::isfinite(K::cross_entropy(in, lab)));
}
