#include "dmx/selftrain.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <unordered_map>
#include <unordered_set>

#include "dmx/kernels.hpp"
#include "dmx/rng.hpp"

namespace dmx {

namespace K = kernels;

std::uint64_t stage_seed(std::uint64_t master_seed, int round, StageTag stage) {
  return derive_seed(master_seed, static_cast<std::uint64_t>(round),
                     static_cast<std::uint64_t>(stage));
}

namespace {

std::uint64_t stage_seed(const RunConfig& cfg, int round, StageTag stage) {
  return stage_seed(cfg.master_seed, round, stage);
}

}  // namespace

ClassThresholds pseudo_thresholds(const std::vector<std::vector<float>>& class_confidences,
                                  float portion, float ceiling) {
  if (!(portion > 0.f && portion <= 1.f))
    throw std::invalid_argument("pseudo_thresholds: portion must be in (0, 1]");
  if (!(ceiling > 0.f && ceiling <= 1.f))
    throw std::invalid_argument("pseudo_thresholds: ceiling must be in (0, 1]");
  ClassThresholds out;
  out.theta.assign(class_confidences.size(), 0.f);
  out.defined.assign(class_confidences.size(), false);
  for (std::size_t c = 0; c < class_confidences.size(); ++c) {
    if (class_confidences[c].empty()) continue;  // no pixels: selects nothing
    std::vector<float> sorted = class_confidences[c];
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    std::size_t k = static_cast<std::size_t>(
        std::floor((1.0 - static_cast<double>(portion)) * static_cast<double>(n)));
    if (k >= n) k = n - 1;
    out.theta[c] = std::min(sorted[k], ceiling);
    out.defined[c] = true;
  }
  return out;
}

PseudoLabeledSet generate_pseudo_labels(const ModelParams& student,
                                        std::span<const ImageSample> unlabeled,
                                        float portion, float ceiling) {
  if (unlabeled.empty()) throw std::invalid_argument("generate_pseudo_labels: empty D_U");
  if (!(portion > 0.f && portion <= 1.f))
    throw std::invalid_argument("generate_pseudo_labels: portion must be in (0, 1]");
  if (!(ceiling > 0.f && ceiling <= 1.f))
    throw std::invalid_argument("generate_pseudo_labels: ceiling must be in (0, 1]");

  const int num_classes = student.num_classes;
  PseudoLabeledSet set;
  set.portion = portion;
  set.ceiling = ceiling;
  set.images.resize(unlabeled.size());

#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(unlabeled.size()); ++i) {
    const ImageSample& img = unlabeled[i];
    const Tensor probs = K::softmax_channel(forward(student, image_to_tensor(img)));
    const int h = img.h, w = img.w;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    PseudoImage out;
    out.sample_id = img.sample_id;
    out.labels = LabelMap(h, w);
    out.confidence.resize(plane);
    for (std::size_t q = 0; q < plane; ++q) {
      int best = 0;
      float bv = probs.data[q];
      for (int k = 1; k < num_classes; ++k) {
        const float v = probs.data[k * plane + q];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out.labels.v[q] = static_cast<std::uint8_t>(best);
      out.confidence[q] = bv;
    }
    set.images[i] = std::move(out);
  }

  // Per-class confidence pools over the whole of D_U, in image order.
  std::vector<std::vector<float>> pool(num_classes);
  for (const PseudoImage& img : set.images)
    for (std::size_t q = 0; q < img.confidence.size(); ++q)
      pool[img.labels.v[q]].push_back(img.confidence[q]);

  const ClassThresholds th = pseudo_thresholds(pool, portion, ceiling);
  set.theta = th.theta;
  set.theta_defined = th.defined;
  set.class_pixels.assign(num_classes, 0);
  for (int c = 0; c < num_classes; ++c) set.class_pixels[c] = pool[c].size();

  for (PseudoImage& img : set.images) {
    for (std::size_t q = 0; q < img.confidence.size(); ++q) {
      const std::uint8_t cls = img.labels.v[q];
      if (!set.theta_defined[cls] || img.confidence[q] < set.theta[cls])
        img.labels.v[q] = kIgnoreLabel;
      else
        ++img.selected;
    }
    set.selected_pixels += img.selected;
    set.total_pixels += img.confidence.size();
  }
  return set;
}

LabeledTargetSet LabeledTargetSet::from_genuine(std::vector<ImageSample> s) {
  LabeledTargetSet set;
  set.genuine.assign(s.size(), 1);
  set.samples = std::move(s);
  return set;
}

std::vector<ImageSample> LabeledTargetSet::genuine_samples() const {
  std::vector<ImageSample> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (genuine[i]) out.push_back(samples[i]);
  return out;
}

std::size_t LabeledTargetSet::genuine_count() const {
  std::size_t n = 0;
  for (std::uint8_t g : genuine) n += g;
  return n;
}

LabeledTargetSet merge_into_labeled(const LabeledTargetSet& current,
                                    const PseudoLabeledSet& pseudo,
                                    std::span<const ImageSample> unlabeled_images) {
  if (pseudo.images.empty()) return current;
  if (pseudo.images.size() != unlabeled_images.size())
    throw std::invalid_argument("merge_into_labeled: pseudo set does not align with D_U");

  std::unordered_set<std::uint64_t> incoming;
  for (const PseudoImage& p : pseudo.images) incoming.insert(p.sample_id);

  LabeledTargetSet out;
  for (std::size_t i = 0; i < current.samples.size(); ++i) {
    if (current.genuine[i]) {
      if (incoming.count(current.samples[i].sample_id))
        throw std::invalid_argument("merge_into_labeled: pseudo id collides with genuine entry");
      out.samples.push_back(current.samples[i]);
      out.genuine.push_back(1);
    } else if (!incoming.count(current.samples[i].sample_id)) {
      out.samples.push_back(current.samples[i]);
      out.genuine.push_back(0);
    }
    // pseudo entries re-labeled this round are replaced below
  }
  for (std::size_t i = 0; i < pseudo.images.size(); ++i) {
    if (pseudo.images[i].sample_id != unlabeled_images[i].sample_id)
      throw std::invalid_argument("merge_into_labeled: pseudo/unlabeled order mismatch");
    ImageSample s = unlabeled_images[i];
    s.labels = pseudo.images[i].labels;
    out.samples.push_back(std::move(s));
    out.genuine.push_back(0);
  }
  return out;
}

namespace {

namespace fs = std::filesystem;

std::vector<ImageSample> styled_source(const RunConfig& cfg, const DatasetBundle& data) {
  std::vector<ImageSample> source = data.source_labeled;
  if (!cfg.style_transfer) return source;
  std::vector<ImageSample> target_train = data.target_labeled;
  target_train.insert(target_train.end(), data.target_unlabeled.begin(),
                      data.target_unlabeled.end());
  const LabStats stats = compute_lab_stats(target_train);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(source.size()); ++i)
    source[i] = lab_style_transfer(source[i], stats);
  return source;
}

std::string round_dir(const RunConfig& cfg, int round) {
  return cfg.out_dir + "/round_" + std::to_string(round);
}

std::vector<std::pair<int, float>> sample_curve(const std::vector<float>& loss) {
  std::vector<std::pair<int, float>> out;
  if (loss.empty()) return out;
  const int step = std::max<int>(1, static_cast<int>(loss.size()) / 80);
  for (std::size_t i = 0; i < loss.size(); i += step)
    out.emplace_back(static_cast<int>(i), loss[i]);
  out.emplace_back(static_cast<int>(loss.size() - 1), loss.back());
  return out;
}

void save_round_checkpoints(const RunConfig& cfg, int round, const ModelParams* rl,
                            const ModelParams* sl, const ModelParams* student,
                            RoundReport& rep) {
  if (cfg.out_dir.empty()) return;
  const std::string dir = round_dir(cfg, round);
  fs::create_directories(dir);
  if (rl) {
    rep.ckpt_rl = dir + "/teacher_rl.dmck";
    save_checkpoint(*rl, rep.ckpt_rl);
  }
  if (sl) {
    rep.ckpt_sl = dir + "/teacher_sl.dmck";
    save_checkpoint(*sl, rep.ckpt_sl);
  }
  if (student) {
    rep.ckpt_student = dir + "/student.dmck";
    save_checkpoint(*student, rep.ckpt_student);
  }
}

void save_pseudo_dataset(const RunConfig& cfg, int round, const PseudoLabeledSet& pseudo,
                         std::span<const ImageSample> unlabeled) {
  if (cfg.out_dir.empty()) return;
  fs::create_directories(round_dir(cfg, round));
  std::vector<ImageSample> samples;
  samples.reserve(pseudo.images.size());
  for (std::size_t i = 0; i < pseudo.images.size(); ++i) {
    ImageSample s = unlabeled[i];
    s.labels = pseudo.images[i].labels;
    samples.push_back(std::move(s));
  }
  write_dataset(samples, kNumClasses, round_dir(cfg, round) + "/pseudo.dmx");
}

}  // namespace

FrameworkResult run_experiment(const RunConfig& cfg, const RoundObserver& observer) {
  validate_config(cfg);
  const bool vanilla = cfg.mode == "vanilla_st";
  const bool teachers_only = cfg.mode == "teachers_only";
  const bool distill_only = cfg.mode == "distill_only";
  const int rounds = (teachers_only || distill_only) ? 1 : cfg.rounds;

  const DatasetBundle data = build_splits(cfg.dataset);
  const std::vector<ImageSample> source = styled_source(cfg, data);
  LabeledTargetSet labeled = LabeledTargetSet::from_genuine(data.target_labeled);
  const std::span<const ImageSample> val(data.target_val);

  FrameworkResult result;
  ModelParams teacher_rl, teacher_sl;
  bool have_teachers = false;
  RoundReport round1;

  for (int r = 1; r <= rounds; ++r) {
    RoundReport rep;
    rep.round = r;
    ModelParams student;

    const bool full_round = !vanilla || r == 1;
    if (full_round) {
      TrainSchedule ts = cfg.schedule;

      ModelParams rl_init = (!have_teachers || cfg.reinit_teachers_per_round)
                                ? init_model(stage_seed(cfg, r, StageTag::init_rl), kNumClasses,
                                             Role::teacher_rl)
                                : teacher_rl;
      rl_init.role = Role::teacher_rl;
      ts.rng_seed = stage_seed(cfg, r, StageTag::train_rl);
      TrainResult rl = train_teacher(TeacherKind::region_level, std::move(rl_init), source,
                                     labeled.samples, ts, {});

      ModelParams sl_init = (!have_teachers || cfg.reinit_teachers_per_round)
                                ? init_model(stage_seed(cfg, r, StageTag::init_sl), kNumClasses,
                                             Role::teacher_sl)
                                : teacher_sl;
      sl_init.role = Role::teacher_sl;
      ts.rng_seed = stage_seed(cfg, r, StageTag::train_sl);
      TrainResult sl = train_teacher(TeacherKind::sample_level, std::move(sl_init), source,
                                     labeled.samples, ts, {});

      teacher_rl = std::move(rl.params);
      teacher_sl = std::move(sl.params);
      have_teachers = true;
      rep.teacher_rl = evaluate_model(teacher_rl, val);
      rep.teacher_sl = evaluate_model(teacher_sl, val);
      rep.ensemble = evaluate_ensemble(teacher_rl, teacher_sl, val);
      rep.teacher_rl_loss = rl.final_loss;
      rep.teacher_sl_loss = sl.final_loss;
      rep.rl_curve = sample_curve(rl.curve.loss);
      rep.sl_curve = sample_curve(sl.curve.loss);

      if (!teachers_only) {
        const std::vector<ImageSample> student_labeled =
            cfg.student_ce_uses_pseudo ? labeled.samples : labeled.genuine_samples();
        ts.rng_seed = stage_seed(cfg, r, StageTag::train_student);
        TrainResult st = train_student(
            init_model(stage_seed(cfg, r, StageTag::init_student), kNumClasses, Role::student),
            teacher_rl, teacher_sl, student_labeled, data.target_unlabeled, ts, cfg.weights,
            {});
        student = std::move(st.params);
        rep.student = evaluate_model(student, val);
        rep.student_loss = st.final_loss;
        rep.student_curve = sample_curve(st.curve.loss);
      }
    } else {
      // Vanilla self-training: teachers untouched, student retrained with CE
      // on its own pseudo-augmented labeled set.
      TrainSchedule ts = cfg.schedule;
      ts.rng_seed = stage_seed(cfg, r, StageTag::train_student);
      TrainResult st = train_supervised(
          init_model(stage_seed(cfg, r, StageTag::init_student), kNumClasses, Role::student),
          labeled.samples, ts, {});
      student = std::move(st.params);
      rep.teacher_rl = round1.teacher_rl;
      rep.teacher_sl = round1.teacher_sl;
      rep.ensemble = round1.ensemble;
      rep.teacher_rl_loss = round1.teacher_rl_loss;
      rep.teacher_sl_loss = round1.teacher_sl_loss;
      rep.ckpt_rl = round1.ckpt_rl;
      rep.ckpt_sl = round1.ckpt_sl;
      rep.student = evaluate_model(student, val);
      rep.student_loss = st.final_loss;
      rep.student_curve = sample_curve(st.curve.loss);
      rep.rl_curve = round1.rl_curve;
      rep.sl_curve = round1.sl_curve;
    }

    if (!teachers_only && !distill_only) {
      const PseudoLabeledSet pseudo = generate_pseudo_labels(
          student, data.target_unlabeled, cfg.pseudo_portion, cfg.pseudo_ceiling);
      rep.pseudo_coverage = pseudo.coverage();
      save_pseudo_dataset(cfg, r, pseudo, data.target_unlabeled);
      labeled = merge_into_labeled(labeled, pseudo, data.target_unlabeled);
    }

    if (full_round)
      save_round_checkpoints(cfg, r, &teacher_rl, &teacher_sl,
                             teachers_only ? nullptr : &student, rep);
    else
      save_round_checkpoints(cfg, r, nullptr, nullptr, &student, rep);

    if (r == 1) round1 = rep;
    if (observer) observer(rep);
    result.reports.push_back(rep);
    if (!teachers_only) result.final_student = std::move(student);
  }
  return result;
}

FrameworkResult run_framework(const RunConfig& config, const RoundObserver& observer) {
  RunConfig cfg = config;
  cfg.mode = "framework";
  return run_experiment(cfg, observer);
}

FrameworkResult run_vanilla_self_training(const RunConfig& config,
                                          const RoundObserver& observer) {
  RunConfig cfg = config;
  cfg.mode = "vanilla_st";
  return run_experiment(cfg, observer);
}

TrainResult train_source_only(const RunConfig& cfg) {
  validate_config(cfg);
  const DatasetBundle data = build_splits(cfg.dataset);
  TrainSchedule ts = cfg.schedule;
  ts.rng_seed = stage_seed(cfg, 1, StageTag::train_source_only);
  TrainResult r = train_supervised(
      init_model(stage_seed(cfg, 1, StageTag::init_source_only), kNumClasses, Role::student),
      data.source_labeled, ts, data.target_val);
  return r;
}

}  // namespace dmx
