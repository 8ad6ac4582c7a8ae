#pragma once

#include <string>
#include <vector>

#include "dmx/config.hpp"
#include "dmx/selftrain.hpp"

namespace dmx {

// metrics.csv schema (fixed): round, stage, model, seed, miou, then one
// column per class IoU, empty when the class is undefined.
void write_metrics_csv(const std::string& path, const RunConfig& config,
                       const std::vector<RoundReport>& reports);

// losses.csv: round, model, iter, loss (sampled points of the loss curves).
void write_losses_csv(const std::string& path, const std::vector<RoundReport>& reports);

// Config echo plus structured round reports; enough to re-run the experiment.
void write_run_json(const std::string& path, const RunConfig& config,
                    const std::vector<RoundReport>& reports);

struct ChartSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

void write_svg_line_chart(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<ChartSeries>& series);

}  // namespace dmx
