#include "dmx/domainmix.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dmx/rng.hpp"

namespace dmx {

BinaryMask sample_mask(std::uint64_t seed, int h, int w, double ratio_lo, double ratio_hi) {
  if (h < 4 || w < 4) throw std::invalid_argument("sample_mask: image too small");
  if (!(0 < ratio_lo && ratio_lo <= ratio_hi && ratio_hi <= 1))
    throw std::invalid_argument("sample_mask: bad ratio range");
  Rng rng(seed);
  const double rh = rng.uniform(ratio_lo, ratio_hi);
  const double rw = rng.uniform(ratio_lo, ratio_hi);
  BinaryMask m;
  m.h = h;
  m.w = w;
  m.rect_height = std::clamp(static_cast<int>(std::lround(rh * h)), 1, h);
  m.rect_width = std::clamp(static_cast<int>(std::lround(rw * w)), 1, w);
  m.rect_top = rng.range_int(0, h - m.rect_height);
  m.rect_left = rng.range_int(0, w - m.rect_width);
  m.values.assign(static_cast<std::size_t>(h) * w, 1);
  for (int y = m.rect_top; y < m.rect_top + m.rect_height; ++y)
    for (int x = m.rect_left; x < m.rect_left + m.rect_width; ++x)
      m.values[static_cast<std::size_t>(y) * w + x] = 0;
  return m;
}

MixedSample region_mix(const ImageSample& target, const ImageSample& source,
                       const BinaryMask& mask) {
  if (target.h != source.h || target.w != source.w)
    throw std::invalid_argument("region_mix: sample sizes differ");
  if (mask.h != target.h || mask.w != target.w)
    throw std::invalid_argument("region_mix: mask size differs from samples");

  MixedSample out;
  out.sample.h = target.h;
  out.sample.w = target.w;
  out.sample.domain = DomainTag::target;
  out.sample.sample_id = target.sample_id;
  out.sample.labels = LabelMap(target.h, target.w);
  out.sample.rgb.resize(target.rgb.size());
  out.provenance.resize(mask.values.size());

  for (std::size_t p = 0; p < mask.values.size(); ++p) {
    const bool from_target = mask.values[p] != 0;
    out.provenance[p] = from_target ? 1 : 0;
    const ImageSample& src = from_target ? target : source;
    out.sample.labels.v[p] = src.labels.v[p];
    for (int ch = 0; ch < 3; ++ch) out.sample.rgb[p * 3 + ch] = src.rgb[p * 3 + ch];
  }
  return out;
}

std::pair<std::size_t, std::size_t> make_sample_level_pair(std::uint64_t seed,
                                                           std::size_t n_source,
                                                           std::size_t n_target) {
  if (n_source == 0 || n_target == 0)
    throw std::invalid_argument("make_sample_level_pair: empty sample set");
  Rng rng(seed);
  const std::size_t si = rng.index(n_source);
  const std::size_t ti = rng.index(n_target);
  return {si, ti};
}

// ---------------------------------------------------------------------------
// CIELAB under D65. The white point is taken as the row sums of the
// RGB->XYZ matrix so that (255,255,255) maps exactly to L=100, a=b=0.

namespace {

constexpr double kM[3][3] = {
    {0.4124, 0.3576, 0.1805},
    {0.2126, 0.7152, 0.0722},
    {0.0193, 0.1192, 0.9505},
};

struct Mat3 {
  double v[3][3];
};

Mat3 invert(const double m[3][3]) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  Mat3 r;
  r.v[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  r.v[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  r.v[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  r.v[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  r.v[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  r.v[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  r.v[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  r.v[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  r.v[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return r;
}

const Mat3 kMinv = invert(kM);

constexpr double kWhite[3] = {
    kM[0][0] + kM[0][1] + kM[0][2],
    kM[1][0] + kM[1][1] + kM[1][2],
    kM[2][0] + kM[2][1] + kM[2][2],
};

constexpr double kEps = 216.0 / 24389.0;
constexpr double kKappa = 24389.0 / 27.0;

double srgb_decode(double u) {
  return u <= 0.04045 ? u / 12.92 : std::pow((u + 0.055) / 1.055, 2.4);
}

double srgb_encode(double u) {
  return u <= 0.0031308 ? 12.92 * u : 1.055 * std::pow(u, 1.0 / 2.4) - 0.055;
}

double lab_f(double t) { return t > kEps ? std::cbrt(t) : (kKappa * t + 16.0) / 116.0; }

}  // namespace

std::array<double, 3> rgb_to_lab(double r, double g, double b) {
  const double lin[3] = {srgb_decode(r / 255.0), srgb_decode(g / 255.0), srgb_decode(b / 255.0)};
  double xyz[3];
  for (int i = 0; i < 3; ++i)
    xyz[i] = kM[i][0] * lin[0] + kM[i][1] * lin[1] + kM[i][2] * lin[2];
  const double fx = lab_f(xyz[0] / kWhite[0]);
  const double fy = lab_f(xyz[1] / kWhite[1]);
  const double fz = lab_f(xyz[2] / kWhite[2]);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

std::array<double, 3> lab_to_rgb(double lum, double a, double b) {
  const double fy = (lum + 16.0) / 116.0;
  const double fx = fy + a / 500.0;
  const double fz = fy - b / 200.0;
  const double fx3 = fx * fx * fx;
  const double fz3 = fz * fz * fz;
  const double xr = fx3 > kEps ? fx3 : (116.0 * fx - 16.0) / kKappa;
  const double yr = lum > kKappa * kEps ? fy * fy * fy : lum / kKappa;
  const double zr = fz3 > kEps ? fz3 : (116.0 * fz - 16.0) / kKappa;
  const double xyz[3] = {xr * kWhite[0], yr * kWhite[1], zr * kWhite[2]};
  std::array<double, 3> rgb;
  for (int i = 0; i < 3; ++i) {
    const double lin = kMinv.v[i][0] * xyz[0] + kMinv.v[i][1] * xyz[1] + kMinv.v[i][2] * xyz[2];
    rgb[i] = std::clamp(srgb_encode(lin) * 255.0, 0.0, 255.0);
  }
  return rgb;
}

std::vector<double> rgb_to_lab_image(const ImageSample& image) {
  std::vector<double> out(image.rgb.size());
  const std::size_t pixels = image.rgb.size() / 3;
  for (std::size_t p = 0; p < pixels; ++p) {
    const auto lab =
        rgb_to_lab(image.rgb[p * 3], image.rgb[p * 3 + 1], image.rgb[p * 3 + 2]);
    for (int c = 0; c < 3; ++c) out[p * 3 + c] = lab[c];
  }
  return out;
}

LabStats lab_stats_of(const std::vector<double>& lab_image) {
  if (lab_image.empty()) throw std::invalid_argument("lab stats: empty input");
  LabStats st;
  const std::size_t pixels = lab_image.size() / 3;
  double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
  for (std::size_t p = 0; p < pixels; ++p)
    for (int c = 0; c < 3; ++c) {
      sum[c] += lab_image[p * 3 + c];
      sq[c] += lab_image[p * 3 + c] * lab_image[p * 3 + c];
    }
  st.pixel_count = pixels;
  for (int c = 0; c < 3; ++c) {
    st.mean[c] = sum[c] / pixels;
    st.stddev[c] = std::sqrt(std::max(0.0, sq[c] / pixels - st.mean[c] * st.mean[c]));
  }
  return st;
}

LabStats compute_lab_stats(const std::vector<ImageSample>& images) {
  if (images.empty()) throw std::invalid_argument("compute_lab_stats: no images");
  LabStats st;
  double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
  std::uint64_t pixels = 0;
  for (const ImageSample& img : images) {
    const auto lab = rgb_to_lab_image(img);
    const std::size_t n = lab.size() / 3;
    for (std::size_t p = 0; p < n; ++p)
      for (int c = 0; c < 3; ++c) {
        sum[c] += lab[p * 3 + c];
        sq[c] += lab[p * 3 + c] * lab[p * 3 + c];
      }
    pixels += n;
  }
  if (pixels == 0) throw std::invalid_argument("compute_lab_stats: no pixels");
  st.pixel_count = pixels;
  for (int c = 0; c < 3; ++c) {
    st.mean[c] = sum[c] / pixels;
    st.stddev[c] = std::sqrt(std::max(0.0, sq[c] / pixels - st.mean[c] * st.mean[c]));
  }
  return st;
}

std::vector<double> lab_style_transfer_lab(const ImageSample& image, const LabStats& target) {
  std::vector<double> lab = rgb_to_lab_image(image);
  const LabStats own = lab_stats_of(lab);
  double scale[3], shift[3];
  for (int c = 0; c < 3; ++c) {
    scale[c] = own.stddev[c] < 1e-6 ? 1.0 : target.stddev[c] / own.stddev[c];
    shift[c] = target.mean[c];
  }
  const std::size_t pixels = lab.size() / 3;
  for (std::size_t p = 0; p < pixels; ++p)
    for (int c = 0; c < 3; ++c)
      lab[p * 3 + c] = (lab[p * 3 + c] - own.mean[c]) * scale[c] + shift[c];
  return lab;
}

ImageSample lab_style_transfer(const ImageSample& image, const LabStats& target) {
  const std::vector<double> lab = lab_style_transfer_lab(image, target);
  ImageSample out = image;  // labels, ids and domain tag are untouched
  const std::size_t pixels = lab.size() / 3;
  for (std::size_t p = 0; p < pixels; ++p) {
    const auto rgb = lab_to_rgb(lab[p * 3], lab[p * 3 + 1], lab[p * 3 + 2]);
    for (int c = 0; c < 3; ++c)
      out.rgb[p * 3 + c] = static_cast<std::uint8_t>(std::lround(rgb[c]));
  }
  return out;
}

}  // namespace dmx
