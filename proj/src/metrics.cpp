#include "dmx/metrics.hpp"

#include <stdexcept>
#include <string>

namespace dmx {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : num_classes_(num_classes),
      counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 1) throw std::invalid_argument("confusion matrix: need >= 1 class");
}

void ConfusionMatrix::accumulate(const LabelMap& prediction, const LabelMap& ground_truth) {
  if (prediction.h != ground_truth.h || prediction.w != ground_truth.w)
    throw std::invalid_argument("confusion matrix: prediction/ground truth shape mismatch");
  for (std::size_t i = 0; i < ground_truth.v.size(); ++i) {
    const std::uint8_t t = ground_truth.v[i];
    const std::uint8_t p = prediction.v[i];
    if (p == kIgnoreLabel)
      throw std::invalid_argument("confusion matrix: prediction contains the ignore label");
    if (p >= num_classes_)
      throw std::invalid_argument("confusion matrix: prediction class " + std::to_string(p) +
                                  " out of range");
    if (t == kIgnoreLabel) {
      ++ignored_;
      continue;
    }
    if (t >= num_classes_)
      throw std::invalid_argument("confusion matrix: ground-truth class out of range");
    ++counts_[static_cast<std::size_t>(t) * num_classes_ + p];
  }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.num_classes_ != num_classes_)
    throw std::invalid_argument("confusion matrix: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  ignored_ += other.ignored_;
  return *this;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = ignored_;
  for (std::uint64_t c : counts_) t += c;
  return t;
}

std::vector<std::optional<double>> ConfusionMatrix::per_class_iou() const {
  std::vector<std::optional<double>> out(num_classes_);
  for (int c = 0; c < num_classes_; ++c) {
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < num_classes_; ++j) {
      row += count(c, j);
      col += count(j, c);
    }
    const std::uint64_t tp = count(c, c);
    const std::uint64_t denom = row + col - tp;
    if (denom > 0) out[c] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  return out;
}

double ConfusionMatrix::miou() const {
  const auto ious = per_class_iou();
  double sum = 0;
  int defined = 0;
  for (const auto& v : ious) {
    if (v) {
      sum += *v;
      ++defined;
    }
  }
  if (defined == 0)
    throw std::invalid_argument("miou: no class is present in ground truth or prediction");
  return sum / defined;
}

}  // namespace dmx
