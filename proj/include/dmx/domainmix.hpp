#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "dmx/synthdata.hpp"

namespace dmx {

// M = 1 on the kept (target) region, 0 inside the rectangle where source
// content is pasted.
struct BinaryMask {
  int h = 0, w = 0;
  int rect_top = 0, rect_left = 0, rect_height = 0, rect_width = 0;
  std::vector<std::uint8_t> values;  // h*w in {0,1}

  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * w + x]; }
};

// Side ratios drawn uniformly per dimension, position uniform among
// placements that fit.
BinaryMask sample_mask(std::uint64_t seed, int h, int w, double ratio_lo = 0.25,
                       double ratio_hi = 0.75);

struct MixedSample {
  ImageSample sample;
  std::vector<std::uint8_t> provenance;  // per pixel: 0 = source, 1 = target
};

// x = M*target + (1-M)*source, labels composed with the same mask.
MixedSample region_mix(const ImageSample& target, const ImageSample& source,
                       const BinaryMask& mask);

// Independent uniform draws (source index, target index).
std::pair<std::size_t, std::size_t> make_sample_level_pair(std::uint64_t seed,
                                                           std::size_t n_source,
                                                           std::size_t n_target);

struct LabStats {
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};  // population
  std::uint64_t pixel_count = 0;
};

// sRGB in [0,255] <-> CIELAB under D65. lab_to_rgb clamps out-of-gamut
// results to [0,255].
std::array<double, 3> rgb_to_lab(double r, double g, double b);
std::array<double, 3> lab_to_rgb(double lum, double a, double b);

// h*w*3 (L,a,b) doubles.
std::vector<double> rgb_to_lab_image(const ImageSample& image);

LabStats compute_lab_stats(const std::vector<ImageSample>& images);
LabStats lab_stats_of(const std::vector<double>& lab_image);

// Match per-channel LAB statistics to target_stats, using the image's own
// stats as source. Channels with stddev < 1e-6 are shifted only.
std::vector<double> lab_style_transfer_lab(const ImageSample& image, const LabStats& target);
ImageSample lab_style_transfer(const ImageSample& image, const LabStats& target);

}  // namespace dmx
