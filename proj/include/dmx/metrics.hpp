#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dmx/label_map.hpp"

namespace dmx {

// Row = ground truth, column = prediction. Ground-truth 255 pixels are
// counted as ignored; predictions must never contain 255.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  void accumulate(const LabelMap& prediction, const LabelMap& ground_truth);
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

  int num_classes() const { return num_classes_; }
  std::uint64_t count(int truth, int pred) const {
    return counts_[static_cast<std::size_t>(truth) * num_classes_ + pred];
  }
  std::uint64_t ignored() const { return ignored_; }
  std::uint64_t total() const;

  // IoU_c = tp / (row + col - tp); empty when the class is absent from both
  // ground truth and prediction.
  std::vector<std::optional<double>> per_class_iou() const;
  // Mean over defined classes; throws when every class is undefined.
  double miou() const;

 private:
  int num_classes_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t ignored_ = 0;
};

}  // namespace dmx
