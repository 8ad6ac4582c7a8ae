#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dmx/distill.hpp"
#include "dmx/synthdata.hpp"

namespace dmx {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flat `key = value` config with `#` comments. Command-line flags override
// file values. Unknown keys are errors.
struct RunConfig {
  DatasetConfig dataset;
  TrainSchedule schedule;
  KDWeights weights;
  int rounds = 3;
  float pseudo_portion = 0.5f;
  float pseudo_ceiling = 0.9f;
  bool style_transfer = true;
  bool student_ce_uses_pseudo = true;
  bool reinit_teachers_per_round = true;
  std::string mode = "framework";  // framework | vanilla_st | teachers_only | distill_only
  std::string out_dir;
  std::uint64_t master_seed = 1;
};

// Throws ConfigError naming the key on unknown keys or unparsable values.
void set_config_key(RunConfig& config, const std::string& key, const std::string& value);

// Range checks; throws ConfigError naming the offending key.
void validate_config(const RunConfig& config);

RunConfig parse_config_file(const std::string& path);

// Full key/value echo; parsing these back reproduces the config.
std::vector<std::pair<std::string, std::string>> config_items(const RunConfig& config);

}  // namespace dmx
