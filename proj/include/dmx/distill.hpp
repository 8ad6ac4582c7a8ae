#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "dmx/domainmix.hpp"
#include "dmx/metrics.hpp"
#include "dmx/optim.hpp"
#include "dmx/segnet.hpp"
#include "dmx/synthdata.hpp"

namespace dmx {

struct TrainSchedule {
  int total_iters = 8000;
  float base_lr = 2.5e-4f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  float poly_power = 0.9f;
  int eval_every = 0;  // 0: evaluate only after the last iteration
  std::uint64_t rng_seed = 0;
};

struct KDWeights {
  float lambda_kl = 0.5f;
  float lambda_ce = 1.0f;
};

struct EvalResult {
  double miou = 0.0;
  std::vector<std::optional<double>> class_iou;
};

struct LossCurve {
  std::vector<float> loss;                       // one entry per iteration
  std::vector<std::pair<int, double>> val_miou;  // (iteration, mIoU)
};

struct TrainResult {
  ModelParams params;
  LossCurve curve;
  float final_loss = 0.f;  // mean over the last 100 iterations
};

// Forward-only loss evaluators (training drives the tape path internally).
float loss_region_teacher(const ModelParams& params, const MixedSample& mixed);
// Sum of the two CE terms, not a mean.
float loss_sample_teacher(const ModelParams& params, const ImageSample& source,
                          const ImageSample& target);

// Per-pixel arithmetic mean of the two teachers' softmax outputs.
Tensor ensemble_predict(const ModelParams& rl, const ModelParams& sl, const Tensor& image);

struct StudentLoss {
  float kl_term = 0.f;  // lambda_kl * KL
  float ce_term = 0.f;  // lambda_ce * CE
  float total = 0.f;
};
StudentLoss loss_student(const ModelParams& student, const ModelParams& rl,
                         const ModelParams& sl, const Tensor& unlabeled_image,
                         const ImageSample& labeled, const KDWeights& weights);

LabelMap predict_labels(const ModelParams& params, const ImageSample& sample);
EvalResult evaluate_model(const ModelParams& params, std::span<const ImageSample> val);
EvalResult evaluate_ensemble(const ModelParams& rl, const ModelParams& sl,
                             std::span<const ImageSample> val);

enum class TeacherKind { region_level, sample_level };

// One iteration draws one (target, source) pair; region-level adds a fresh
// mask and minimizes CE on the mixed sample, sample-level minimizes the sum
// of the two CE terms.
TrainResult train_teacher(TeacherKind kind, ModelParams init,
                          std::span<const ImageSample> source,
                          std::span<const ImageSample> target_labeled,
                          const TrainSchedule& schedule, std::span<const ImageSample> val);

// Teachers are frozen; each iteration draws one labeled target sample and one
// unlabeled image.
TrainResult train_student(ModelParams init, const ModelParams& rl, const ModelParams& sl,
                          std::span<const ImageSample> labeled,
                          std::span<const ImageSample> unlabeled,
                          const TrainSchedule& schedule, const KDWeights& weights,
                          std::span<const ImageSample> val);

// Plain CE training on one sample set (source-only baseline, vanilla
// self-training rounds).
TrainResult train_supervised(ModelParams init, std::span<const ImageSample> samples,
                             const TrainSchedule& schedule, std::span<const ImageSample> val);

}  // namespace dmx
