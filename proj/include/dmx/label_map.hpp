#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace dmx {

inline constexpr std::uint8_t kIgnoreLabel = 255;

// Per-pixel class ids, row-major. 255 marks ignored/unlabeled pixels.
struct LabelMap {
  int h = 0, w = 0;
  std::vector<std::uint8_t> v;

  LabelMap() = default;
  LabelMap(int h_, int w_, std::uint8_t fill = 0)
      : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, fill) {
    if (h_ <= 0 || w_ <= 0) throw std::invalid_argument("label map dimensions must be positive");
  }

  std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
  std::size_t numel() const { return v.size(); }

  bool operator==(const LabelMap& o) const { return h == o.h && w == o.w && v == o.v; }
};

}  // namespace dmx
