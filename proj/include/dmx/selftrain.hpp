#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmx/config.hpp"
#include "dmx/distill.hpp"

namespace dmx {

struct PseudoImage {
  std::uint64_t sample_id = 0;
  LabelMap labels;                // 255 where unselected
  std::vector<float> confidence;  // max softmax per pixel
  std::uint64_t selected = 0;
};

// Per-class thresholds: t_c is the (1-p) lower-interpolation quantile of the
// confidences predicted as class c over all of D_U; theta_c = min(t_c, tau).
struct PseudoLabeledSet {
  std::vector<PseudoImage> images;
  std::vector<float> theta;
  std::vector<bool> theta_defined;  // false: class had no predicted pixels
  std::vector<std::uint64_t> class_pixels;
  float portion = 0.5f;
  float ceiling = 0.9f;
  std::uint64_t total_pixels = 0;
  std::uint64_t selected_pixels = 0;

  double coverage() const {
    return total_pixels ? static_cast<double>(selected_pixels) / total_pixels : 0.0;
  }
};

// theta_c = min(t_c, tau) where t_c is the lower-interpolation (1-p)
// quantile of class c's confidences; classes with empty pools stay
// undefined. Exposed separately so the selection rule can be checked against
// independent oracles.
struct ClassThresholds {
  std::vector<float> theta;
  std::vector<bool> defined;
};
ClassThresholds pseudo_thresholds(const std::vector<std::vector<float>>& class_confidences,
                                  float portion, float ceiling);

PseudoLabeledSet generate_pseudo_labels(const ModelParams& student,
                                        std::span<const ImageSample> unlabeled,
                                        float portion = 0.5f, float ceiling = 0.9f);

// Genuine entries are never overwritten; re-merging replaces earlier pseudo
// entries with the same sample id instead of duplicating them.
struct LabeledTargetSet {
  std::vector<ImageSample> samples;
  std::vector<std::uint8_t> genuine;  // parallel to samples

  static LabeledTargetSet from_genuine(std::vector<ImageSample> s);
  std::vector<ImageSample> genuine_samples() const;
  std::size_t genuine_count() const;
};

LabeledTargetSet merge_into_labeled(const LabeledTargetSet& current,
                                    const PseudoLabeledSet& pseudo,
                                    std::span<const ImageSample> unlabeled_images);

struct RoundReport {
  int round = 1;
  std::optional<EvalResult> teacher_rl, teacher_sl, student, ensemble;
  float teacher_rl_loss = 0.f, teacher_sl_loss = 0.f, student_loss = 0.f;
  double pseudo_coverage = 0.0;
  std::string ckpt_rl, ckpt_sl, ckpt_student;
  // Sampled training-loss curves, (iteration, loss).
  std::vector<std::pair<int, float>> rl_curve, sl_curve, student_curve;
};

struct FrameworkResult {
  std::vector<RoundReport> reports;
  std::optional<ModelParams> final_student;
};

using RoundObserver = std::function<void(const RoundReport&)>;

// Runs config.mode. Checkpoints and per-round pseudo datasets are written
// under config.out_dir when it is set.
FrameworkResult run_experiment(const RunConfig& config, const RoundObserver& observer = {});

// Algorithm: per round train both teachers on (styled D_S, current D_T),
// distill the student, pseudo-label D_U with it and fold the result into D_T
// for the next round. Teachers and student are freshly initialized per round.
FrameworkResult run_framework(const RunConfig& config, const RoundObserver& observer = {});

// Round 1 matches run_framework bitwise under the same seed; later rounds
// retrain only the student with CE on its own pseudo-augmented labeled set.
FrameworkResult run_vanilla_self_training(const RunConfig& config,
                                          const RoundObserver& observer = {});

// CE baseline on raw (untransferred) source data, evaluated on target val.
TrainResult train_source_only(const RunConfig& config);

// Seed derivation for (round, stage). Pure function of its arguments so a
// round can be re-run in isolation from stored round-(r-1) state.
enum class StageTag : std::uint64_t {
  init_rl = 1,
  init_sl = 2,
  init_student = 3,
  train_rl = 4,
  train_sl = 5,
  train_student = 6,
  init_source_only = 7,
  train_source_only = 8,
};
std::uint64_t stage_seed(std::uint64_t master_seed, int round, StageTag stage);

}  // namespace dmx
