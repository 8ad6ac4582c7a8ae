#include "dmx/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>

#include "dmx/io_error.hpp"
#include "dmx/rng.hpp"

namespace dmx {

namespace {

constexpr std::uint64_t kLayoutStream = 0x11;
constexpr std::uint64_t kAppearanceStream = 0x22;
constexpr std::uint64_t kSourceStream = 1;
constexpr std::uint64_t kTargetStream = 2;
constexpr std::uint64_t kSplitStream = 3;

// Warm palette: the red channel carries most of the mass so the target
// gain/offset shift produces a measurable gap.
constexpr float kPalette[kNumClasses][3] = {
    {0.55f, 0.46f, 0.40f},  // background
    {0.78f, 0.35f, 0.32f},  // circle
    {0.38f, 0.66f, 0.36f},  // rectangle
    {0.36f, 0.40f, 0.72f},  // triangle
    {0.80f, 0.70f, 0.34f},  // stripe
};

struct Box {
  int x0, y0, x1, y1;  // inclusive
  bool overlaps(const Box& o) const {
    return !(x1 < o.x0 || o.x1 < x0 || y1 < o.y0 || o.y1 < y0);
  }
};

void rasterize_layout(Rng& rng, int h, int w, LabelMap& labels) {
  labels = LabelMap(h, w, 0);

  const int band_h = rng.range_int(4, 10);
  const int band_y = rng.range_int(0, h - band_h);
  for (int y = band_y; y < band_y + band_h; ++y)
    for (int x = 0; x < w; ++x) labels.at(y, x) = 4;

  // Geometry ranges clamp to the image so small scenes stay valid.
  const int r_hi = std::min(12, (std::min(h, w) - 2) / 2);
  const int r_lo = std::min(5, r_hi);
  const int side_hi = std::min(22, std::min(h, w));
  const int side_lo = std::min(8, side_hi);
  const int base_hi = std::min(24, w - 2);
  const int base_lo = std::min(10, base_hi);
  const int th_hi = std::min(22, h - 2);
  const int th_lo = std::min(10, th_hi);

  std::vector<Box> placed;
  const int shapes = rng.range_int(1, 3);
  for (int s = 0; s < shapes; ++s) {
    const int type = rng.range_int(1, 3);
    for (int attempt = 0; attempt < 20; ++attempt) {
      if (type == 1) {  // circle
        const int r = rng.range_int(r_lo, r_hi);
        const int cx = rng.range_int(r, w - 1 - r);
        const int cy = rng.range_int(r, h - 1 - r);
        const Box b{cx - r, cy - r, cx + r, cy + r};
        bool bad = false;
        for (const Box& p : placed) bad = bad || b.overlaps(p);
        if (bad) continue;
        placed.push_back(b);
        for (int y = cy - r; y <= cy + r; ++y)
          for (int x = cx - r; x <= cx + r; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) labels.at(y, x) = 1;
        break;
      } else if (type == 2) {  // axis-aligned rectangle
        const int rw = rng.range_int(side_lo, side_hi);
        const int rh = rng.range_int(side_lo, side_hi);
        const int x0 = rng.range_int(0, w - rw);
        const int y0 = rng.range_int(0, h - rh);
        const Box b{x0, y0, x0 + rw - 1, y0 + rh - 1};
        bool bad = false;
        for (const Box& p : placed) bad = bad || b.overlaps(p);
        if (bad) continue;
        placed.push_back(b);
        for (int y = y0; y < y0 + rh; ++y)
          for (int x = x0; x < x0 + rw; ++x) labels.at(y, x) = 2;
        break;
      } else {  // triangle, apex up
        const int base = rng.range_int(base_lo, base_hi);
        const int th = rng.range_int(th_lo, th_hi);
        const int half = base / 2;
        const int ax = rng.range_int(half, w - 1 - half);
        const int ay = rng.range_int(0, h - 1 - th);
        const Box b{ax - half, ay, ax + half, ay + th};
        bool bad = false;
        for (const Box& p : placed) bad = bad || b.overlaps(p);
        if (bad) continue;
        placed.push_back(b);
        for (int y = ay; y <= ay + th; ++y) {
          const int hw = static_cast<int>(
              std::lround(static_cast<double>(half) * (y - ay) / th));
          for (int x = ax - hw; x <= ax + hw; ++x) labels.at(y, x) = 3;
        }
        break;
      }
    }
  }
}

std::uint8_t quantize(float v) {
  const float c = std::clamp(v, 0.f, 1.f);
  return static_cast<std::uint8_t>(std::lround(c * 255.f));
}

}  // namespace

ImageSample generate_scene(std::uint64_t seed, const DomainStyle& style, int h, int w) {
  Rng layout(derive_seed(seed, kLayoutStream));
  Rng appearance(derive_seed(seed, kAppearanceStream));

  ImageSample sample;
  sample.h = h;
  sample.w = w;
  rasterize_layout(layout, h, w, sample.labels);

  // Base colors: per-class jitter, a vertical shade, light pixel texture.
  float colors[kNumClasses][3];
  for (int c = 0; c < kNumClasses; ++c)
    for (int ch = 0; ch < 3; ++ch)
      colors[c][ch] = kPalette[c][ch] + static_cast<float>(appearance.uniform(-0.05, 0.05));
  const float shade = static_cast<float>(appearance.uniform(-0.05, 0.05));

  std::vector<float> img(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y) {
    const float sh = shade * (static_cast<float>(y) / h - 0.5f);
    for (int x = 0; x < w; ++x) {
      const int cls = sample.labels.at(y, x);
      float* px = &img[(static_cast<std::size_t>(y) * w + x) * 3];
      for (int ch = 0; ch < 3; ++ch)
        px[ch] = colors[cls][ch] + sh + static_cast<float>(appearance.uniform(-0.015, 0.015));
    }
  }

  // Style: gain/offset, box blur, noise, saturation. Labels stay untouched.
  for (std::size_t i = 0; i < img.size(); i += 3)
    for (int ch = 0; ch < 3; ++ch) img[i + ch] = img[i + ch] * style.gain[ch] + style.offset[ch];

  if (style.blur_enabled) {
    std::vector<float> blurred(img.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < 3; ++ch) {
          float acc = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = std::clamp(y + dy, 0, h - 1);
              const int xx = std::clamp(x + dx, 0, w - 1);
              acc += img[(static_cast<std::size_t>(yy) * w + xx) * 3 + ch];
            }
          blurred[(static_cast<std::size_t>(y) * w + x) * 3 + ch] = acc / 9.f;
        }
    img.swap(blurred);
  }

  if (style.noise_sigma > 0.f)
    for (float& v : img)
      v += style.noise_sigma * static_cast<float>(appearance.normal());

  if (style.saturation_scale != 1.f)
    for (std::size_t i = 0; i < img.size(); i += 3) {
      const float luma = 0.299f * img[i] + 0.587f * img[i + 1] + 0.114f * img[i + 2];
      for (int ch = 0; ch < 3; ++ch)
        img[i + ch] = luma + style.saturation_scale * (img[i + ch] - luma);
    }

  sample.rgb.resize(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) sample.rgb[i] = quantize(img[i]);
  return sample;
}

namespace {

void check_dataset_config(const DatasetConfig& cfg) {
  if (cfg.n_source <= 0 || cfg.n_target_labeled <= 0 || cfg.n_target_unlabeled <= 0 ||
      cfg.n_val <= 0)
    throw std::invalid_argument("dataset config: all split sizes must be positive");
  if (cfg.height < 8 || cfg.width < 8)
    throw std::invalid_argument("dataset config: image size too small");
  const std::uint64_t train_count =
      static_cast<std::uint64_t>(cfg.n_target_labeled) + cfg.n_target_unlabeled;
  const std::uint64_t train_lo = cfg.target_train_id_base;
  const std::uint64_t train_hi = train_lo + train_count;
  const std::uint64_t val_lo = cfg.target_val_id_base;
  const std::uint64_t val_hi = val_lo + cfg.n_val;
  if (train_lo < val_hi && val_lo < train_hi)
    throw std::invalid_argument("dataset config: target train/val id ranges overlap");
}

}  // namespace

DatasetBundle build_splits(const DatasetConfig& cfg) {
  check_dataset_config(cfg);
  DatasetBundle bundle;
  bundle.num_classes = kNumClasses;

  bundle.source_labeled.resize(cfg.n_source);
#pragma omp parallel for schedule(dynamic, 16)
  for (int i = 0; i < cfg.n_source; ++i) {
    const std::uint64_t id = cfg.source_id_base + i;
    ImageSample s = generate_scene(derive_seed(cfg.seed, kSourceStream, id), cfg.source_style,
                                   cfg.height, cfg.width);
    s.domain = DomainTag::source;
    s.sample_id = id;
    bundle.source_labeled[i] = std::move(s);
  }

  const int pool = cfg.n_target_labeled + cfg.n_target_unlabeled;
  std::vector<ImageSample> target_pool(pool);
#pragma omp parallel for schedule(dynamic, 16)
  for (int i = 0; i < pool; ++i) {
    const std::uint64_t id = cfg.target_train_id_base + i;
    ImageSample s = generate_scene(derive_seed(cfg.seed, kTargetStream, id), cfg.target_style,
                                   cfg.height, cfg.width);
    s.domain = DomainTag::target;
    s.sample_id = id;
    target_pool[i] = std::move(s);
  }

  // Which pool entries carry labels is a seeded choice.
  std::vector<int> order(pool);
  std::iota(order.begin(), order.end(), 0);
  Rng sel(derive_seed(cfg.seed, kSplitStream));
  for (int i = pool - 1; i > 0; --i)
    std::swap(order[i], order[sel.index(static_cast<std::size_t>(i) + 1)]);
  std::vector<int> labeled_idx(order.begin(), order.begin() + cfg.n_target_labeled);
  std::vector<int> unlabeled_idx(order.begin() + cfg.n_target_labeled, order.end());
  std::sort(labeled_idx.begin(), labeled_idx.end());
  std::sort(unlabeled_idx.begin(), unlabeled_idx.end());

  bundle.target_labeled.reserve(labeled_idx.size());
  for (int i : labeled_idx) bundle.target_labeled.push_back(std::move(target_pool[i]));
  bundle.target_unlabeled.reserve(unlabeled_idx.size());
  for (int i : unlabeled_idx) {
    ImageSample s = std::move(target_pool[i]);
    std::fill(s.labels.v.begin(), s.labels.v.end(), kIgnoreLabel);
    bundle.target_unlabeled.push_back(std::move(s));
  }

  bundle.target_val.resize(cfg.n_val);
#pragma omp parallel for schedule(dynamic, 16)
  for (int i = 0; i < cfg.n_val; ++i) {
    const std::uint64_t id = cfg.target_val_id_base + i;
    ImageSample s = generate_scene(derive_seed(cfg.seed, kTargetStream, id), cfg.target_style,
                                   cfg.height, cfg.width);
    s.domain = DomainTag::target;
    s.sample_id = id;
    bundle.target_val[i] = std::move(s);
  }
  return bundle;
}

ImageSample regenerate_target_ground_truth(const DatasetConfig& cfg, std::uint64_t sample_id) {
  ImageSample s = generate_scene(derive_seed(cfg.seed, kTargetStream, sample_id),
                                 cfg.target_style, cfg.height, cfg.width);
  s.domain = DomainTag::target;
  s.sample_id = sample_id;
  return s;
}

double domain_gap(const std::vector<ImageSample>& a, const std::vector<ImageSample>& b) {
  auto channel_means = [](const std::vector<ImageSample>& set) {
    double sum[3] = {0, 0, 0};
    std::uint64_t n = 0;
    for (const ImageSample& s : set) {
      for (std::size_t i = 0; i < s.rgb.size(); i += 3) {
        for (int ch = 0; ch < 3; ++ch) sum[ch] += s.rgb[i + ch] / 255.0;
      }
      n += s.rgb.size() / 3;
    }
    return std::array<double, 3>{sum[0] / n, sum[1] / n, sum[2] / n};
  };
  const auto ma = channel_means(a), mb = channel_means(b);
  double gap = 0;
  for (int ch = 0; ch < 3; ++ch) gap = std::max(gap, std::abs(ma[ch] - mb[ch]));
  return gap;
}

// ---------------------------------------------------------------------------
// DMX1 container

namespace {

constexpr char kMagic[4] = {'D', 'M', 'X', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxDim = 16384;
constexpr std::uint32_t kMaxCount = 1u << 24;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError(IoErrorKind::truncated, "dataset file truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is) {
  const std::uint64_t lo = get_u32(is);
  const std::uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}

}  // namespace

void write_dataset(const std::vector<ImageSample>& samples, int num_classes,
                   const std::string& path) {
  if (samples.empty()) throw std::invalid_argument("write_dataset: no samples");
  const int h = samples[0].h, w = samples[0].w;
  for (const ImageSample& s : samples) {
    if (s.h != h || s.w != w)
      throw std::invalid_argument("write_dataset: samples must share one size");
    for (std::uint8_t v : s.labels.v)
      if (v != kIgnoreLabel && v >= num_classes)
        throw std::invalid_argument("write_dataset: label out of range");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(IoErrorKind::open_failed, "cannot open " + path + " for writing");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(samples.size()));
  put_u32(os, static_cast<std::uint32_t>(h));
  put_u32(os, static_cast<std::uint32_t>(w));
  put_u32(os, static_cast<std::uint32_t>(num_classes));
  for (const ImageSample& s : samples) {
    put_u64(os, s.sample_id);
    const unsigned char tag = static_cast<unsigned char>(s.domain);
    os.write(reinterpret_cast<const char*>(&tag), 1);
    os.write(reinterpret_cast<const char*>(s.rgb.data()),
             static_cast<std::streamsize>(s.rgb.size()));
    os.write(reinterpret_cast<const char*>(s.labels.v.data()),
             static_cast<std::streamsize>(s.labels.v.size()));
  }
  if (!os) throw IoError(IoErrorKind::open_failed, "write failed for " + path);
}

std::vector<ImageSample> read_dataset(const std::string& path, int* num_classes) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(IoErrorKind::open_failed, "cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError(IoErrorKind::bad_magic, "not a DMX1 file: " + path);
  const std::uint32_t version = get_u32(is);
  if (version != kVersion)
    throw IoError(IoErrorKind::bad_version, "unsupported DMX1 version " + std::to_string(version));
  const std::uint32_t count = get_u32(is);
  const std::uint32_t h = get_u32(is);
  const std::uint32_t w = get_u32(is);
  const std::uint32_t classes = get_u32(is);
  if (count > kMaxCount || h == 0 || w == 0 || h > kMaxDim || w > kMaxDim || classes == 0 ||
      classes > 254)
    throw IoError(IoErrorKind::dim_overflow, "DMX1 header dimensions out of range");

  std::vector<ImageSample> samples(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    ImageSample& s = samples[i];
    s.h = static_cast<int>(h);
    s.w = static_cast<int>(w);
    s.sample_id = get_u64(is);
    char tag;
    is.read(&tag, 1);
    if (!is) throw IoError(IoErrorKind::truncated, "dataset file truncated");
    if (tag != 0 && tag != 1)
      throw IoError(IoErrorKind::bad_value, "bad domain tag in " + path);
    s.domain = static_cast<DomainTag>(tag);
    s.rgb.resize(static_cast<std::size_t>(h) * w * 3);
    is.read(reinterpret_cast<char*>(s.rgb.data()), static_cast<std::streamsize>(s.rgb.size()));
    s.labels = LabelMap(static_cast<int>(h), static_cast<int>(w));
    is.read(reinterpret_cast<char*>(s.labels.v.data()),
            static_cast<std::streamsize>(s.labels.v.size()));
    if (!is) throw IoError(IoErrorKind::truncated, "dataset file truncated");
    for (std::uint8_t v : s.labels.v)
      if (v != kIgnoreLabel && v >= classes)
        throw IoError(IoErrorKind::bad_value, "label out of range in " + path);
  }
  if (num_classes) *num_classes = static_cast<int>(classes);
  return samples;
}

Tensor image_to_tensor(const ImageSample& s) {
  Tensor t({3, s.h, s.w});
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  for (std::size_t p = 0; p < plane; ++p)
    for (int ch = 0; ch < 3; ++ch)
      t.data[ch * plane + p] = static_cast<float>(s.rgb[p * 3 + ch]) / 255.f;
  return t;
}

}  // namespace dmx
