#include "dmx/distill.hpp"

#include <algorithm>
#include <stdexcept>

#include "dmx/autodiff.hpp"
#include "dmx/kernels.hpp"
#include "dmx/rng.hpp"

namespace dmx {

namespace K = kernels;

float loss_region_teacher(const ModelParams& params, const MixedSample& mixed) {
  const Tensor logits = forward(params, image_to_tensor(mixed.sample));
  return K::cross_entropy(logits, mixed.sample.labels);
}

float loss_sample_teacher(const ModelParams& params, const ImageSample& source,
                          const ImageSample& target) {
  const float ls = K::cross_entropy(forward(params, image_to_tensor(source)), source.labels);
  const float lt = K::cross_entropy(forward(params, image_to_tensor(target)), target.labels);
  return ls + lt;
}

Tensor ensemble_predict(const ModelParams& rl, const ModelParams& sl, const Tensor& image) {
  if (rl.num_classes != sl.num_classes)
    throw std::invalid_argument("ensemble_predict: teacher class counts differ");
  Tensor a = K::softmax_channel(forward(rl, image));
  const Tensor b = K::softmax_channel(forward(sl, image));
  for (std::size_t i = 0; i < a.numel(); ++i) a.data[i] = 0.5f * (a.data[i] + b.data[i]);
  return a;
}

StudentLoss loss_student(const ModelParams& student, const ModelParams& rl,
                         const ModelParams& sl, const Tensor& unlabeled_image,
                         const ImageSample& labeled, const KDWeights& weights) {
  const Tensor target = ensemble_predict(rl, sl, unlabeled_image);
  const float kl = K::kl_divergence(target, forward(student, unlabeled_image));
  const float ce =
      K::cross_entropy(forward(student, image_to_tensor(labeled)), labeled.labels);
  StudentLoss out;
  out.kl_term = weights.lambda_kl * kl;
  out.ce_term = weights.lambda_ce * ce;
  out.total = out.kl_term + out.ce_term;
  return out;
}

namespace {

LabelMap argmax_of(const Tensor& scores) {
  const int c = scores.dim(0), h = scores.dim(1), w = scores.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  LabelMap pred(h, w);
  for (std::size_t q = 0; q < plane; ++q) {
    int best = 0;
    float bv = scores.data[q];
    for (int k = 1; k < c; ++k) {
      const float v = scores.data[k * plane + q];
      if (v > bv) {
        bv = v;
        best = k;
      }
    }
    pred.v[q] = static_cast<std::uint8_t>(best);
  }
  return pred;
}

EvalResult eval_from_cm(const ConfusionMatrix& cm) {
  EvalResult r;
  r.class_iou = cm.per_class_iou();
  r.miou = cm.miou();
  return r;
}

}  // namespace

LabelMap predict_labels(const ModelParams& params, const ImageSample& sample) {
  return argmax_of(forward(params, image_to_tensor(sample)));
}

EvalResult evaluate_model(const ModelParams& params, std::span<const ImageSample> val) {
  if (val.empty()) throw std::invalid_argument("evaluate_model: empty validation set");
  std::vector<ConfusionMatrix> parts(val.size(), ConfusionMatrix(params.num_classes));
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(val.size()); ++i)
    parts[i].accumulate(predict_labels(params, val[i]), val[i].labels);
  ConfusionMatrix cm(params.num_classes);
  for (const auto& p : parts) cm += p;
  return eval_from_cm(cm);
}

EvalResult evaluate_ensemble(const ModelParams& rl, const ModelParams& sl,
                             std::span<const ImageSample> val) {
  if (val.empty()) throw std::invalid_argument("evaluate_ensemble: empty validation set");
  std::vector<ConfusionMatrix> parts(val.size(), ConfusionMatrix(rl.num_classes));
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(val.size()); ++i) {
    const Tensor probs = ensemble_predict(rl, sl, image_to_tensor(val[i]));
    parts[i].accumulate(argmax_of(probs), val[i].labels);
  }
  ConfusionMatrix cm(rl.num_classes);
  for (const auto& p : parts) cm += p;
  return eval_from_cm(cm);
}

namespace {

// Shared optimization loop; step() builds one iteration's loss on a fresh
// tape.
template <typename StepFn>
TrainResult run_training(ModelParams init, const TrainSchedule& sched,
                         std::span<const ImageSample> val, StepFn&& step) {
  if (sched.total_iters <= 0) throw std::invalid_argument("training: total_iters must be > 0");
  TrainResult result;
  result.params = std::move(init);
  ModelParams& params = result.params;

  const std::vector<Tensor*> ptrs = params.tensors();
  OptimizerState opt =
      make_optimizer({ptrs.begin(), ptrs.end()}, sched.base_lr, sched.momentum,
                     sched.weight_decay, sched.poly_power, sched.total_iters);

  Rng rng(sched.rng_seed);
  result.curve.loss.reserve(sched.total_iters);
  for (int it = 0; it < sched.total_iters; ++it) {
    Tape<float> tape;
    const ModelVarsT<float> vars = make_model_vars(tape, params);
    const Tape<float>::Var loss = step(tape, vars, rng);
    tape.backward(loss);
    result.curve.loss.push_back(tape.scalar_value(loss));

    const auto var_list = vars.all();
    std::vector<const Tensor*> grads;
    grads.reserve(var_list.size());
    for (const auto& v : var_list) grads.push_back(&tape.grad(v));
    sgd_step(ptrs, grads, opt);

    if (!val.empty() && sched.eval_every > 0 && (it + 1) % sched.eval_every == 0 &&
        it + 1 != sched.total_iters)
      result.curve.val_miou.emplace_back(it + 1, evaluate_model(params, val).miou);
  }
  if (!val.empty())
    result.curve.val_miou.emplace_back(sched.total_iters, evaluate_model(params, val).miou);

  const std::size_t tail = std::min<std::size_t>(100, result.curve.loss.size());
  float acc = 0.f;
  for (std::size_t i = result.curve.loss.size() - tail; i < result.curve.loss.size(); ++i)
    acc += result.curve.loss[i];
  result.final_loss = acc / static_cast<float>(tail);
  return result;
}

}  // namespace

TrainResult train_teacher(TeacherKind kind, ModelParams init,
                          std::span<const ImageSample> source,
                          std::span<const ImageSample> target_labeled,
                          const TrainSchedule& sched, std::span<const ImageSample> val) {
  if (source.empty() || target_labeled.empty())
    throw std::invalid_argument("train_teacher: empty sample set");

  if (kind == TeacherKind::region_level) {
    return run_training(
        std::move(init), sched, val,
        [&](Tape<float>& tape, const ModelVarsT<float>& vars, Rng& rng) {
          const ImageSample& tgt = target_labeled[rng.index(target_labeled.size())];
          const ImageSample& src = source[rng.index(source.size())];
          const BinaryMask mask = sample_mask(rng.next_u64(), tgt.h, tgt.w);
          const MixedSample mixed = region_mix(tgt, src, mask);
          auto x = tape.constant(image_to_tensor(mixed.sample));
          auto logits = forward_on_tape(tape, vars, x);
          return tape.cross_entropy(logits, mixed.sample.labels);
        });
  }
  return run_training(
      std::move(init), sched, val,
      [&](Tape<float>& tape, const ModelVarsT<float>& vars, Rng& rng) {
        const ImageSample& src = source[rng.index(source.size())];
        const ImageSample& tgt = target_labeled[rng.index(target_labeled.size())];
        auto ls = tape.cross_entropy(
            forward_on_tape(tape, vars, tape.constant(image_to_tensor(src))), src.labels);
        auto lt = tape.cross_entropy(
            forward_on_tape(tape, vars, tape.constant(image_to_tensor(tgt))), tgt.labels);
        return tape.add(ls, lt);
      });
}

TrainResult train_student(ModelParams init, const ModelParams& rl, const ModelParams& sl,
                          std::span<const ImageSample> labeled,
                          std::span<const ImageSample> unlabeled,
                          const TrainSchedule& sched, const KDWeights& weights,
                          std::span<const ImageSample> val) {
  if (unlabeled.empty())
    throw std::invalid_argument("train_student: empty unlabeled set (KD term undefined)");
  if (labeled.empty()) throw std::invalid_argument("train_student: empty labeled set");
  if (rl.num_classes != init.num_classes || sl.num_classes != init.num_classes)
    throw std::invalid_argument("train_student: class count mismatch with teachers");

  // The teachers are frozen for the whole stage, so their ensemble output per
  // unlabeled image is iteration-invariant; compute it once up front.
  std::vector<Tensor> targets(unlabeled.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(unlabeled.size()); ++i)
    targets[i] = ensemble_predict(rl, sl, image_to_tensor(unlabeled[i]));

  return run_training(
      std::move(init), sched, val,
      [&, targets = std::move(targets)](Tape<float>& tape, const ModelVarsT<float>& vars,
                                        Rng& rng) {
        const ImageSample& lab = labeled[rng.index(labeled.size())];
        const std::size_t ui = rng.index(unlabeled.size());

        auto logits_u =
            forward_on_tape(tape, vars, tape.constant(image_to_tensor(unlabeled[ui])));
        auto kl = tape.kl_divergence(targets[ui], logits_u);
        auto logits_t = forward_on_tape(tape, vars, tape.constant(image_to_tensor(lab)));
        auto ce = tape.cross_entropy(logits_t, lab.labels);
        return tape.add(tape.scale(kl, weights.lambda_kl), tape.scale(ce, weights.lambda_ce));
      });
}

TrainResult train_supervised(ModelParams init, std::span<const ImageSample> samples,
                             const TrainSchedule& sched, std::span<const ImageSample> val) {
  if (samples.empty()) throw std::invalid_argument("train_supervised: empty sample set");
  return run_training(std::move(init), sched, val,
                      [&](Tape<float>& tape, const ModelVarsT<float>& vars, Rng& rng) {
                        const ImageSample& s = samples[rng.index(samples.size())];
                        auto logits =
                            forward_on_tape(tape, vars, tape.constant(image_to_tensor(s)));
                        return tape.cross_entropy(logits, s.labels);
                      });
}

}  // namespace dmx
