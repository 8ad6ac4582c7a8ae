#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dmx/label_map.hpp"
#include "dmx/tensor.hpp"

namespace dmx {

inline constexpr int kNumClasses = 5;

// Class taxonomy of the generated scenes:
//   0 background, 1 circle, 2 rectangle, 3 triangle, 4 stripe band
enum class DomainTag : std::uint8_t { source = 0, target = 1 };

struct ImageSample {
  int h = 0, w = 0;
  std::vector<std::uint8_t> rgb;  // h*w*3 row-major
  LabelMap labels;
  DomainTag domain = DomainTag::source;
  std::uint64_t sample_id = 0;

  bool operator==(const ImageSample& o) const {
    return h == o.h && w == o.w && rgb == o.rgb && labels == o.labels && domain == o.domain &&
           sample_id == o.sample_id;
  }
};

// Appearance shift applied after the scene layout is rasterized. Labels are
// never touched by styling.
struct DomainStyle {
  std::array<float, 3> gain{1.f, 1.f, 1.f};
  std::array<float, 3> offset{0.f, 0.f, 0.f};
  bool blur_enabled = false;
  float noise_sigma = 0.f;
  float saturation_scale = 1.f;

  static DomainStyle source_default() { return DomainStyle{}; }
  static DomainStyle target_default() {
    DomainStyle s;
    s.gain = {0.75f, 0.9f, 1.15f};
    s.offset = {0.05f, 0.0f, -0.05f};
    s.blur_enabled = true;
    s.noise_sigma = 0.03f;
    s.saturation_scale = 0.8f;
    return s;
  }
};

struct DatasetConfig {
  int n_source = 2000;
  int n_target_labeled = 20;
  int n_target_unlabeled = 500;
  int n_val = 200;
  std::uint64_t seed = 1;
  int height = 64, width = 64;
  DomainStyle source_style = DomainStyle::source_default();
  DomainStyle target_style = DomainStyle::target_default();
  std::uint64_t source_id_base = 0;
  std::uint64_t target_train_id_base = 0;
  std::uint64_t target_val_id_base = 1u << 20;
};

struct DatasetBundle {
  std::vector<ImageSample> source_labeled;
  std::vector<ImageSample> target_labeled;
  std::vector<ImageSample> target_unlabeled;  // labels erased to 255
  std::vector<ImageSample> target_val;
  int num_classes = kNumClasses;
};

// Deterministic per (seed, style): the layout stream fixes labels, the
// appearance stream fixes colors, so two styles of the same seed share the
// exact label map.
ImageSample generate_scene(std::uint64_t seed, const DomainStyle& style, int h = 64, int w = 64);

DatasetBundle build_splits(const DatasetConfig& config);

// Ground truth for unlabeled/validation ids is regenerable from the config;
// it is kept out of the bundle on purpose. Test fixtures only.
ImageSample regenerate_target_ground_truth(const DatasetConfig& config, std::uint64_t sample_id);

// Max over channels of |mean_a - mean_b| with intensities in [0,1].
double domain_gap(const std::vector<ImageSample>& a, const std::vector<ImageSample>& b);

// DMX1 container, little-endian. Layout: "DMX1", u32 version=1, u32 count,
// u32 H, u32 W, u32 num_classes; per sample u64 id, u8 domain, H*W*3 rgb,
// H*W labels.
void write_dataset(const std::vector<ImageSample>& samples, int num_classes,
                   const std::string& path);
std::vector<ImageSample> read_dataset(const std::string& path, int* num_classes = nullptr);

// 3xHxW float tensor in [0,1].
Tensor image_to_tensor(const ImageSample& sample);

}  // namespace dmx
