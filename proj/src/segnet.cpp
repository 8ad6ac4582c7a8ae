#include "dmx/segnet.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "dmx/io_error.hpp"
#include "dmx/kernels.hpp"
#include "dmx/rng.hpp"

namespace dmx {

namespace K = kernels;

namespace {

constexpr int kStem1 = 16;
constexpr int kStem2 = 32;

std::vector<std::vector<int>> architecture_shapes(int num_classes) {
  return {
      {kStem1, 3, 3, 3},      {kStem1},  // stem1
      {kStem2, kStem1, 3, 3}, {kStem2},  // stem2
      {kStem2, kStem2, 3, 3}, {kStem2},  // aspp_d1
      {kStem2, kStem2, 3, 3}, {kStem2},  // aspp_d2
      {kStem2, kStem2, 3, 3}, {kStem2},  // aspp_d4
      {num_classes, kStem2, 1, 1},
      {num_classes},
  };
}

void check_image(const std::vector<int>& s) {
  if (s.size() != 3 || s[0] != 3)
    throw std::invalid_argument("forward: input must be (3,H,W), got " + shape_str(s));
  if (s[1] < 8 || s[2] < 8 || s[1] % 2 != 0 || s[2] % 2 != 0)
    throw std::invalid_argument("forward: H and W must be even and >= 8, got " + shape_str(s));
}

}  // namespace

ModelParams init_model(std::uint64_t seed, int num_classes, Role role) {
  if (num_classes < 2) throw std::invalid_argument("init_model: num_classes must be >= 2");
  ModelParams p;
  p.role = role;
  p.num_classes = num_classes;
  const auto shapes = architecture_shapes(num_classes);
  auto ts = p.tensors();
  Rng rng(seed);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    *ts[i] = Tensor(shapes[i]);
    if (shapes[i].size() == 4) {
      const int fan_in = shapes[i][1] * shapes[i][2] * shapes[i][3];
      const float std_dev = std::sqrt(2.f / static_cast<float>(fan_in));
      for (float& v : ts[i]->data) v = std_dev * static_cast<float>(rng.normal());
    }
    // biases stay zero
  }
  return p;
}

std::size_t param_count(int num_classes) {
  std::size_t n = 0;
  for (const auto& s : architecture_shapes(num_classes)) {
    std::size_t t = 1;
    for (int d : s) t *= static_cast<std::size_t>(d);
    n += t;
  }
  return n;
}

template <typename T>
TensorT<T> forward(const ModelParamsT<T>& p, const TensorT<T>& image) {
  check_image(image.shape);
  const K::ConvSpec pad1{1, 1, 1};
  const K::ConvSpec stride2{2, 1, 1};
  const K::ConvSpec d2{1, 2, 2};
  const K::ConvSpec d4{1, 4, 4};
  const K::ConvSpec point{1, 1, 0};

  TensorT<T> x = K::relu_forward(K::conv2d_forward(image, p.stem1_w, p.stem1_b, pad1));
  x = K::relu_forward(K::conv2d_forward(x, p.stem2_w, p.stem2_b, stride2));
  TensorT<T> a = K::conv2d_forward(x, p.aspp1_w, p.aspp1_b, pad1);
  const TensorT<T> b = K::conv2d_forward(x, p.aspp2_w, p.aspp2_b, d2);
  const TensorT<T> c = K::conv2d_forward(x, p.aspp4_w, p.aspp4_b, d4);
  // same association as the tape path (add(add(a,b),c)) so logits match it
  // bitwise
  for (std::size_t i = 0; i < a.numel(); ++i) a.data[i] = (a.data[i] + b.data[i]) + c.data[i];
  const TensorT<T> f = K::relu_forward(a);
  const TensorT<T> logits_half = K::conv2d_forward(f, p.head_w, p.head_b, point);
  return K::upsample_forward(logits_half, 2);
}

template <typename T>
ModelVarsT<T> make_model_vars(Tape<T>& tape, const ModelParamsT<T>& p) {
  ModelVarsT<T> v;
  v.stem1_w = tape.leaf(p.stem1_w);
  v.stem1_b = tape.leaf(p.stem1_b);
  v.stem2_w = tape.leaf(p.stem2_w);
  v.stem2_b = tape.leaf(p.stem2_b);
  v.aspp1_w = tape.leaf(p.aspp1_w);
  v.aspp1_b = tape.leaf(p.aspp1_b);
  v.aspp2_w = tape.leaf(p.aspp2_w);
  v.aspp2_b = tape.leaf(p.aspp2_b);
  v.aspp4_w = tape.leaf(p.aspp4_w);
  v.aspp4_b = tape.leaf(p.aspp4_b);
  v.head_w = tape.leaf(p.head_w);
  v.head_b = tape.leaf(p.head_b);
  return v;
}

template <typename T>
typename Tape<T>::Var forward_on_tape(Tape<T>& tape, const ModelVarsT<T>& v,
                                      typename Tape<T>::Var image) {
  check_image(tape.value(image).shape);
  const K::ConvSpec pad1{1, 1, 1};
  const K::ConvSpec stride2{2, 1, 1};
  const K::ConvSpec d2{1, 2, 2};
  const K::ConvSpec d4{1, 4, 4};
  const K::ConvSpec point{1, 1, 0};

  auto x = tape.relu(tape.conv2d(image, v.stem1_w, v.stem1_b, pad1));
  x = tape.relu(tape.conv2d(x, v.stem2_w, v.stem2_b, stride2));
  auto a = tape.conv2d(x, v.aspp1_w, v.aspp1_b, pad1);
  auto b = tape.conv2d(x, v.aspp2_w, v.aspp2_b, d2);
  auto c = tape.conv2d(x, v.aspp4_w, v.aspp4_b, d4);
  auto f = tape.relu(tape.add(tape.add(a, b), c));
  auto logits_half = tape.conv2d(f, v.head_w, v.head_b, point);
  return tape.upsample_bilinear(logits_half, 2);
}

// ---------------------------------------------------------------------------
// DMCK checkpoints

namespace {

constexpr char kCkptMagic[4] = {'D', 'M', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

void put_u16(std::ostream& os, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  if (!is) throw IoError(IoErrorKind::truncated, "checkpoint truncated");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError(IoErrorKind::truncated, "checkpoint truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(IoErrorKind::open_failed, "cannot open " + path + " for writing");
  os.write(kCkptMagic, 4);
  put_u32(os, kCkptVersion);
  std::uint32_t count = 0;
  params.visit([&](const char*, const Tensor&) { ++count; });
  put_u32(os, count);
  params.visit([&](const char* name, const Tensor& t) {
    const std::size_t len = std::strlen(name);
    put_u16(os, static_cast<std::uint16_t>(len));
    os.write(name, static_cast<std::streamsize>(len));
    const unsigned char nd = static_cast<unsigned char>(t.ndim());
    os.write(reinterpret_cast<const char*>(&nd), 1);
    for (int d : t.shape) put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.data) put_u32(os, std::bit_cast<std::uint32_t>(v));
  });
  if (!os) throw IoError(IoErrorKind::open_failed, "write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(IoErrorKind::open_failed, "cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCkptMagic, 4) != 0)
    throw IoError(IoErrorKind::bad_magic, "not a DMCK checkpoint: " + path);
  if (get_u32(is) != kCkptVersion)
    throw IoError(IoErrorKind::bad_version, "unsupported checkpoint version");
  const std::uint32_t count = get_u32(is);

  std::vector<std::pair<std::string, Tensor>> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = get_u16(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw IoError(IoErrorKind::truncated, "checkpoint truncated");
    unsigned char nd;
    is.read(reinterpret_cast<char*>(&nd), 1);
    if (!is || nd == 0 || nd > 4)
      throw IoError(IoErrorKind::dim_overflow, "bad tensor rank in checkpoint");
    std::vector<int> shape(nd);
    for (auto& d : shape) {
      const std::uint32_t v = get_u32(is);
      if (v == 0 || v > (1u << 20))
        throw IoError(IoErrorKind::dim_overflow, "bad tensor dimension in checkpoint");
      d = static_cast<int>(v);
    }
    Tensor t(shape);
    for (float& v : t.data) v = std::bit_cast<float>(get_u32(is));
    entries.emplace_back(std::move(name), std::move(t));
  }

  if (entries.size() != 12)
    throw IoError(IoErrorKind::schema_mismatch, "checkpoint does not hold 12 tensors");
  // num_classes comes from the head shape; everything else must match the
  // fixed architecture exactly.
  const Tensor& head = entries[10].second;
  if (entries[10].first != "head.weight" || head.ndim() != 4)
    throw IoError(IoErrorKind::schema_mismatch, "checkpoint head tensor malformed");
  const int num_classes = head.dim(0);
  if (num_classes < 2)
    throw IoError(IoErrorKind::schema_mismatch, "checkpoint head has < 2 classes");

  ModelParams p;
  p.num_classes = num_classes;
  const auto shapes = architecture_shapes(num_classes);
  std::size_t idx = 0;
  bool ok = true;
  p.visit([&](const char* name, Tensor& t) {
    if (entries[idx].first != name || entries[idx].second.shape != shapes[idx]) ok = false;
    if (ok) t = std::move(entries[idx].second);
    ++idx;
  });
  if (!ok)
    throw IoError(IoErrorKind::schema_mismatch,
                  "checkpoint tensor names or shapes do not match the architecture");
  return p;
}

template TensorT<float> forward<float>(const ModelParamsT<float>&, const TensorT<float>&);
template TensorT<double> forward<double>(const ModelParamsT<double>&, const TensorT<double>&);
template ModelVarsT<float> make_model_vars<float>(Tape<float>&, const ModelParamsT<float>&);
template ModelVarsT<double> make_model_vars<double>(Tape<double>&, const ModelParamsT<double>&);
template Tape<float>::Var forward_on_tape<float>(Tape<float>&, const ModelVarsT<float>&,
                                                 Tape<float>::Var);
template Tape<double>::Var forward_on_tape<double>(Tape<double>&, const ModelVarsT<double>&,
                                                   Tape<double>::Var);

}  // namespace dmx
