#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dmx/config.hpp"
#include "dmx/segnet.hpp"
#include "dmx/selftrain.hpp"
#include "dmx/synthdata.hpp"

using namespace dmx;
namespace fs = std::filesystem;

#ifndef DMX_CLI_PATH
#define DMX_CLI_PATH "./dmx"
#endif

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const char* tag) {
    path = fs::temp_directory_path() /
           (std::string("dmx_cli_") + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const char* name) const { return (path / name).string(); }
};

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DMX_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  return std::string((std::istreambuf_iterator<char>(is)), {});
}

void write_file(const std::string& path, const std::string& body) {
  std::ofstream os(path);
  os << body;
}

std::string tiny_cfg_body() {
  return "# tiny run\n"
         "n_source = 10\n"
         "n_target_labeled = 3\n"
         "n_target_unlabeled = 6\n"
         "n_val = 4\n"
         "image_size = 32\n"
         "iters = 20\n"
         "rounds = 1\n";
}

}  // namespace

TEST_CASE("defaults carry the published constants") {
  const RunConfig c = parse_config_file("");
  CHECK(c.weights.lambda_kl == 0.5f);
  CHECK(c.weights.lambda_ce == 1.0f);
  CHECK(c.pseudo_portion == 0.5f);
  CHECK(c.pseudo_ceiling == 0.9f);
  CHECK(c.schedule.base_lr == 2.5e-4f);
  CHECK(c.schedule.momentum == 0.9f);
  CHECK(c.schedule.weight_decay == 1e-4f);
  CHECK(c.schedule.poly_power == 0.9f);
  CHECK(c.rounds == 3);
  CHECK(c.style_transfer);
  CHECK(c.mode == "framework");
  CHECK(c.dataset.n_source == 2000);
  CHECK(c.dataset.n_target_labeled == 20);
  CHECK(c.dataset.n_target_unlabeled == 500);
  CHECK(c.dataset.n_val == 200);
  CHECK(c.schedule.total_iters == 8000);
  CHECK_NOTHROW(validate_config(c));
}

TEST_CASE("unknown keys and bad values name the key") {
  RunConfig c;
  try {
    set_config_key(c, "lamda_kl", "0.5");
    FAIL("expected unknown key");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("lamda_kl") != std::string::npos);
  }
  try {
    set_config_key(c, "lambda_kl", "abc");
    FAIL("expected bad value");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("lambda_kl") != std::string::npos);
  }
  set_config_key(c, "lambda_kl", "-1");
  try {
    validate_config(c);
    FAIL("expected range error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("lambda_kl") != std::string::npos);
  }
}

TEST_CASE("config file parsing with comments; flags override file values") {
  TempDir tmp("cfg");
  write_file(tmp.str("a.conf"),
             "# comment line\n"
             "rounds = 4   # trailing comment\n"
             "\n"
             "lambda_kl = 0.25\n"
             "mode = vanilla_st\n");
  RunConfig c = parse_config_file(tmp.str("a.conf"));
  CHECK(c.rounds == 4);
  CHECK(c.weights.lambda_kl == 0.25f);
  CHECK(c.mode == "vanilla_st");

  // flag overrides file: --rounds 2 beats rounds = 4
  set_config_key(c, "rounds", "2");
  CHECK(c.rounds == 2);

  write_file(tmp.str("bad.conf"), "just some text\n");
  CHECK_THROWS_AS(parse_config_file(tmp.str("bad.conf")), ConfigError);
}

TEST_CASE("config echo reproduces the config") {
  RunConfig c;
  c.rounds = 5;
  c.weights.lambda_kl = 0.125f;
  c.mode = "teachers_only";
  c.master_seed = 42;
  RunConfig back;
  for (const auto& [k, v] : config_items(c)) {
    if (v.empty()) continue;
    set_config_key(back, k, v);
  }
  CHECK(back.rounds == 5);
  CHECK(back.weights.lambda_kl == 0.125f);
  CHECK(back.mode == "teachers_only");
  CHECK(back.master_seed == 42);
}

TEST_CASE("cli: gen-data writes loadable DMX1 files") {
  TempDir tmp("gen");
  write_file(tmp.str("c.conf"), tiny_cfg_body());
  const int rc = run_cli("gen-data --config " + tmp.str("c.conf") + " --out " +
                         (tmp.path / "data").string());
  REQUIRE(rc == 0);
  int nc = 0;
  const auto src = read_dataset((tmp.path / "data" / "source.dmx").string(), &nc);
  CHECK(src.size() == 10);
  CHECK(nc == kNumClasses);
  const auto unl = read_dataset((tmp.path / "data" / "target_unlabeled.dmx").string());
  CHECK(unl.size() == 6);
  for (const auto& s : unl)
    for (std::uint8_t v : s.labels.v) CHECK(v == kIgnoreLabel);
}

TEST_CASE("cli: run produces the documented artifacts and is reproducible") {
  TempDir tmp("run");
  write_file(tmp.str("c.conf"), tiny_cfg_body());
  const std::string out1 = (tmp.path / "r1").string();
  const std::string out2 = (tmp.path / "r2").string();
  REQUIRE(run_cli("run --config " + tmp.str("c.conf") + " --out " + out1) == 0);
  REQUIRE(run_cli("run --config " + tmp.str("c.conf") + " --out " + out2) == 0);

  const std::string metrics = read_file(out1 + "/metrics.csv");
  CHECK(metrics.find("teacher_RL") != std::string::npos);
  CHECK(metrics.find("teacher_SL") != std::string::npos);
  CHECK(metrics.find("student") != std::string::npos);
  CHECK(metrics.rfind("round,stage,model,seed,miou", 0) == 0);

  // bitwise reproducibility of metrics and checkpoints
  CHECK(read_file(out1 + "/metrics.csv") == read_file(out2 + "/metrics.csv"));
  CHECK(read_file(out1 + "/round_1/student.dmck") ==
        read_file(out2 + "/round_1/student.dmck"));
  CHECK(fs::exists(out1 + "/run.json"));
  CHECK(fs::exists(out1 + "/losses.csv"));
}

TEST_CASE("cli: flag overrides change the run") {
  TempDir tmp("ovr");
  write_file(tmp.str("c.conf"), tiny_cfg_body() + "rounds = 2\n");
  const std::string out = (tmp.path / "r").string();
  REQUIRE(run_cli("run --config " + tmp.str("c.conf") + " --out " + out + " --rounds 1") == 0);
  const std::string metrics = read_file(out + "/metrics.csv");
  CHECK(metrics.find("\n2,") == std::string::npos);  // no round-2 rows
}

TEST_CASE("cli: eval prints per-class IoU and mIoU; fresh model is near chance") {
  TempDir tmp("eval");
  write_file(tmp.str("c.conf"), tiny_cfg_body());
  const std::string data_dir = (tmp.path / "data").string();
  REQUIRE(run_cli("gen-data --config " + tmp.str("c.conf") + " --out " + data_dir) == 0);
  const ModelParams fresh = init_model(123, kNumClasses);
  save_checkpoint(fresh, tmp.str("fresh.dmck"));

  const std::string cmd = std::string(DMX_CLI_PATH) + " eval --checkpoint " +
                          tmp.str("fresh.dmck") + " --data " + data_dir +
                          "/target_val.dmx > " + tmp.str("eval.out") + " 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  const std::string out = read_file(tmp.str("eval.out"));
  CHECK(out.find("class_0_iou") != std::string::npos);
  const auto pos = out.find("miou ");
  REQUIRE(pos != std::string::npos);
  const double miou = std::strtod(out.c_str() + pos + 5, nullptr);
  // a freshly initialized model must sit near the random baseline
  CHECK(miou < 0.25);
}

TEST_CASE("cli: vanilla-st and report work end to end") {
  TempDir tmp("rep");
  write_file(tmp.str("c.conf"), tiny_cfg_body() + "rounds = 2\n");
  const std::string fw = (tmp.path / "fw").string();
  const std::string van = (tmp.path / "van").string();
  REQUIRE(run_cli("run --config " + tmp.str("c.conf") + " --out " + fw) == 0);
  REQUIRE(run_cli("vanilla-st --config " + tmp.str("c.conf") + " --out " + van) == 0);

  const std::string rep_out = (tmp.path / "rep").string();
  REQUIRE(run_cli("report " + fw + " " + van + " --out " + rep_out) == 0);
  const std::string csv = read_file(rep_out + "/comparison.csv");
  CHECK(csv.rfind("run,mode,seed,round,model,miou", 0) == 0);
  CHECK(csv.find("vanilla_st") != std::string::npos);
  CHECK(csv.find("framework") != std::string::npos);
  const std::string svg = read_file(rep_out + "/report.svg");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("polyline") != std::string::npos);
}

TEST_CASE("cli: error exit categories") {
  TempDir tmp("err");
  // unknown config key -> 1
  write_file(tmp.str("bad.conf"), "not_a_key = 1\n");
  CHECK(run_cli("run --config " + tmp.str("bad.conf") + " --out " + tmp.str("o")) == 1);
  // missing files -> 2
  CHECK(run_cli("eval --checkpoint /nonexistent.dmck --data /nonexistent.dmx") == 2);
  // malformed checkpoint -> 3
  write_file(tmp.str("junk.dmck"), "XXXXjunkjunk");
  write_file(tmp.str("junk.dmx"), "YYYYjunk");
  CHECK(run_cli("eval --checkpoint " + tmp.str("junk.dmck") + " --data " +
                tmp.str("junk.dmx")) == 3);
}
