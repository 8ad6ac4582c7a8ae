#include "dmx/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace dmx {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const long long v = std::strtoll(value.c_str(), &end, 10);
  if (end == value.c_str() || *end != '\0')
    throw ConfigError("config: value for '" + key + "' is not an integer: " + value);
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const unsigned long long v = std::strtoull(value.c_str(), &end, 10);
  if (end == value.c_str() || *end != '\0')
    throw ConfigError("config: value for '" + key + "' is not an integer: " + value);
  return v;
}

double parse_float(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (end == value.c_str() || *end != '\0')
    throw ConfigError("config: value for '" + key + "' is not a number: " + value);
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config: value for '" + key + "' is not a boolean: " + value);
}

}  // namespace

void set_config_key(RunConfig& c, const std::string& key, const std::string& value) {
  if (key == "n_source")
    c.dataset.n_source = static_cast<int>(parse_int(key, value));
  else if (key == "n_target_labeled")
    c.dataset.n_target_labeled = static_cast<int>(parse_int(key, value));
  else if (key == "n_target_unlabeled")
    c.dataset.n_target_unlabeled = static_cast<int>(parse_int(key, value));
  else if (key == "n_val")
    c.dataset.n_val = static_cast<int>(parse_int(key, value));
  else if (key == "data_seed")
    c.dataset.seed = parse_u64(key, value);
  else if (key == "image_size") {
    c.dataset.height = static_cast<int>(parse_int(key, value));
    c.dataset.width = c.dataset.height;
  } else if (key == "iters")
    c.schedule.total_iters = static_cast<int>(parse_int(key, value));
  else if (key == "base_lr")
    c.schedule.base_lr = static_cast<float>(parse_float(key, value));
  else if (key == "momentum")
    c.schedule.momentum = static_cast<float>(parse_float(key, value));
  else if (key == "weight_decay")
    c.schedule.weight_decay = static_cast<float>(parse_float(key, value));
  else if (key == "poly_power")
    c.schedule.poly_power = static_cast<float>(parse_float(key, value));
  else if (key == "eval_every")
    c.schedule.eval_every = static_cast<int>(parse_int(key, value));
  else if (key == "lambda_kl")
    c.weights.lambda_kl = static_cast<float>(parse_float(key, value));
  else if (key == "lambda_ce")
    c.weights.lambda_ce = static_cast<float>(parse_float(key, value));
  else if (key == "rounds")
    c.rounds = static_cast<int>(parse_int(key, value));
  else if (key == "pseudo_portion")
    c.pseudo_portion = static_cast<float>(parse_float(key, value));
  else if (key == "pseudo_ceiling")
    c.pseudo_ceiling = static_cast<float>(parse_float(key, value));
  else if (key == "style_transfer")
    c.style_transfer = parse_bool(key, value);
  else if (key == "student_ce_uses_pseudo")
    c.student_ce_uses_pseudo = parse_bool(key, value);
  else if (key == "reinit_teachers_per_round")
    c.reinit_teachers_per_round = parse_bool(key, value);
  else if (key == "mode")
    c.mode = value;
  else if (key == "out_dir")
    c.out_dir = value;
  else if (key == "seed")
    c.master_seed = parse_u64(key, value);
  else
    throw ConfigError("config: unknown key '" + key + "'");
}

void validate_config(const RunConfig& c) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  require(c.dataset.n_source > 0, "n_source must be positive");
  require(c.dataset.n_target_labeled > 0, "n_target_labeled must be positive");
  require(c.dataset.n_target_unlabeled > 0, "n_target_unlabeled must be positive");
  require(c.dataset.n_val > 0, "n_val must be positive");
  require(c.dataset.height >= 8 && c.dataset.height <= 512 && c.dataset.height % 2 == 0,
          "image_size must be even and in [8, 512]");
  require(c.schedule.total_iters > 0, "iters must be positive");
  require(c.schedule.eval_every >= 0, "eval_every must be >= 0");
  require(c.schedule.eval_every == 0 || c.schedule.total_iters % c.schedule.eval_every == 0,
          "eval_every must divide iters");
  require(c.schedule.base_lr > 0, "base_lr must be positive");
  require(c.schedule.momentum >= 0 && c.schedule.momentum < 1, "momentum must be in [0, 1)");
  require(c.schedule.weight_decay >= 0, "weight_decay must be >= 0");
  require(c.schedule.poly_power > 0, "poly_power must be positive");
  require(c.weights.lambda_kl >= 0, "lambda_kl must be >= 0");
  require(c.weights.lambda_ce >= 0, "lambda_ce must be >= 0");
  require(c.rounds >= 1, "rounds must be >= 1");
  require(c.pseudo_portion > 0 && c.pseudo_portion <= 1, "pseudo_portion must be in (0, 1]");
  require(c.pseudo_ceiling > 0 && c.pseudo_ceiling <= 1, "pseudo_ceiling must be in (0, 1]");
  require(c.mode == "framework" || c.mode == "vanilla_st" || c.mode == "teachers_only" ||
              c.mode == "distill_only",
          "mode must be one of framework|vanilla_st|teachers_only|distill_only");
}

RunConfig parse_config_file(const std::string& path) {
  RunConfig c;
  if (path.empty()) return c;
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
    set_config_key(c, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
  }
  return c;
}

std::vector<std::pair<std::string, std::string>> config_items(const RunConfig& c) {
  auto fmt = [](double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
  };
  return {
      {"n_source", std::to_string(c.dataset.n_source)},
      {"n_target_labeled", std::to_string(c.dataset.n_target_labeled)},
      {"n_target_unlabeled", std::to_string(c.dataset.n_target_unlabeled)},
      {"n_val", std::to_string(c.dataset.n_val)},
      {"data_seed", std::to_string(c.dataset.seed)},
      {"image_size", std::to_string(c.dataset.height)},
      {"iters", std::to_string(c.schedule.total_iters)},
      {"base_lr", fmt(c.schedule.base_lr)},
      {"momentum", fmt(c.schedule.momentum)},
      {"weight_decay", fmt(c.schedule.weight_decay)},
      {"poly_power", fmt(c.schedule.poly_power)},
      {"eval_every", std::to_string(c.schedule.eval_every)},
      {"lambda_kl", fmt(c.weights.lambda_kl)},
      {"lambda_ce", fmt(c.weights.lambda_ce)},
      {"rounds", std::to_string(c.rounds)},
      {"pseudo_portion", fmt(c.pseudo_portion)},
      {"pseudo_ceiling", fmt(c.pseudo_ceiling)},
      {"style_transfer", c.style_transfer ? "true" : "false"},
      {"student_ce_uses_pseudo", c.student_ce_uses_pseudo ? "true" : "false"},
      {"reinit_teachers_per_round", c.reinit_teachers_per_round ? "true" : "false"},
      {"mode", c.mode},
      {"out_dir", c.out_dir},
      {"seed", std::to_string(c.master_seed)},
  };
}

}  // namespace dmx
