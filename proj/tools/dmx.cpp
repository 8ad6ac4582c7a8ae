#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dmx/config.hpp"
#include "dmx/io_error.hpp"
#include "dmx/report_io.hpp"
#include "dmx/selftrain.hpp"

namespace fs = std::filesystem;

namespace {

// Exit status categories: 1 usage/config, 2 missing file or unwritable
// output, 3 malformed file, 4 internal failure.
constexpr int kExitConfig = 1;
constexpr int kExitIo = 2;
constexpr int kExitFormat = 3;
constexpr int kExitInternal = 4;

struct FlagOverrides {
  std::string config_path;
  std::string out_dir;
  std::string mode;
  std::uint64_t seed = 0;
  int rounds = 0;
  bool seed_set = false, rounds_set = false, no_style_transfer = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "flat key = value config file");
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--seed", seed, "master seed")->each([this](const std::string&) {
      seed_set = true;
    });
    cmd->add_option("--rounds", rounds, "iterative rounds R")->each([this](const std::string&) {
      rounds_set = true;
    });
    cmd->add_flag("--no-style-transfer", no_style_transfer,
                  "skip the LAB style transfer of source images");
    cmd->add_option("--mode", mode, "framework|vanilla_st|teachers_only|distill_only");
  }

  dmx::RunConfig build() const {
    dmx::RunConfig cfg = dmx::parse_config_file(config_path);
    if (seed_set) dmx::set_config_key(cfg, "seed", std::to_string(seed));
    if (rounds_set) dmx::set_config_key(cfg, "rounds", std::to_string(rounds));
    if (!out_dir.empty()) dmx::set_config_key(cfg, "out_dir", out_dir);
    if (!mode.empty()) dmx::set_config_key(cfg, "mode", mode);
    if (no_style_transfer) dmx::set_config_key(cfg, "style_transfer", "false");
    dmx::validate_config(cfg);
    return cfg;
  }
};

void print_eval(const dmx::EvalResult& r) {
  for (std::size_t c = 0; c < r.class_iou.size(); ++c) {
    if (r.class_iou[c])
      std::printf("class_%zu_iou %.6f\n", c, *r.class_iou[c]);
    else
      std::printf("class_%zu_iou undefined\n", c);
  }
  std::printf("miou %.6f\n", r.miou);
}

int cmd_gen_data(const FlagOverrides& flags) {
  dmx::RunConfig cfg = flags.build();
  if (cfg.out_dir.empty()) throw dmx::ConfigError("gen-data: --out (or out_dir) is required");
  fs::create_directories(cfg.out_dir);
  const dmx::DatasetBundle b = dmx::build_splits(cfg.dataset);
  dmx::write_dataset(b.source_labeled, b.num_classes, cfg.out_dir + "/source.dmx");
  dmx::write_dataset(b.target_labeled, b.num_classes, cfg.out_dir + "/target_labeled.dmx");
  dmx::write_dataset(b.target_unlabeled, b.num_classes, cfg.out_dir + "/target_unlabeled.dmx");
  dmx::write_dataset(b.target_val, b.num_classes, cfg.out_dir + "/target_val.dmx");
  std::printf("wrote %d source / %d labeled / %d unlabeled / %d val samples to %s\n",
              cfg.dataset.n_source, cfg.dataset.n_target_labeled, cfg.dataset.n_target_unlabeled,
              cfg.dataset.n_val, cfg.out_dir.c_str());
  return 0;
}

int run_with_mode(dmx::RunConfig cfg) {
  if (cfg.out_dir.empty()) throw dmx::ConfigError("run: --out (or out_dir) is required");
  fs::create_directories(cfg.out_dir);

  const auto t0 = std::chrono::steady_clock::now();
  dmx::FrameworkResult result = dmx::run_experiment(cfg, [&](const dmx::RoundReport& r) {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("round %d (%.0fs):", r.round, secs);
    if (r.teacher_rl) std::printf(" teacher_RL %.4f", r.teacher_rl->miou);
    if (r.teacher_sl) std::printf(" teacher_SL %.4f", r.teacher_sl->miou);
    if (r.ensemble) std::printf(" ensemble %.4f", r.ensemble->miou);
    if (r.student) std::printf(" student %.4f", r.student->miou);
    std::printf(" pseudo_coverage %.3f\n", r.pseudo_coverage);
    std::fflush(stdout);
  });

  dmx::write_metrics_csv(cfg.out_dir + "/metrics.csv", cfg, result.reports);
  dmx::write_losses_csv(cfg.out_dir + "/losses.csv", result.reports);
  dmx::write_run_json(cfg.out_dir + "/run.json", cfg, result.reports);
  std::printf("artifacts written to %s\n", cfg.out_dir.c_str());
  return 0;
}

int cmd_run(const FlagOverrides& flags) { return run_with_mode(flags.build()); }

int cmd_vanilla_st(const FlagOverrides& flags) {
  dmx::RunConfig cfg = flags.build();
  cfg.mode = "vanilla_st";
  return run_with_mode(std::move(cfg));
}

int cmd_eval(const std::string& checkpoint, const std::string& data_path) {
  const dmx::ModelParams params = dmx::load_checkpoint(checkpoint);
  int num_classes = 0;
  const std::vector<dmx::ImageSample> samples = dmx::read_dataset(data_path, &num_classes);
  if (num_classes != params.num_classes)
    throw dmx::IoError(dmx::IoErrorKind::schema_mismatch,
                       "checkpoint classes != dataset classes");
  print_eval(dmx::evaluate_model(params, samples));
  return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  fs::create_directories(out_dir.empty() ? "." : out_dir);
  const std::string base = out_dir.empty() ? "." : out_dir;

  std::ofstream csv(base + "/comparison.csv");
  if (!csv)
    throw dmx::IoError(dmx::IoErrorKind::open_failed, "cannot write " + base + "/comparison.csv");
  csv << "run,mode,seed,round,model,miou\n";

  std::vector<dmx::ChartSeries> series;
  for (const std::string& dir : run_dirs) {
    const std::string jpath = dir + "/run.json";
    std::ifstream is(jpath);
    if (!is) throw dmx::IoError(dmx::IoErrorKind::open_failed, "cannot open " + jpath);
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw dmx::IoError(dmx::IoErrorKind::bad_value, jpath + ": " + e.what());
    }
    if (!j.contains("config") || !j.contains("rounds"))
      throw dmx::IoError(dmx::IoErrorKind::schema_mismatch, jpath + ": not a run.json");
    const std::string mode = j["config"].value("mode", "?");
    const std::string seed = j["config"].value("seed", "?");
    const std::string name = fs::path(dir).filename().string();

    dmx::ChartSeries s;
    s.name = name + " (" + mode + ")";
    for (const auto& r : j["rounds"]) {
      const int round = r.value("round", 0);
      for (const char* model : {"teacher_rl", "teacher_sl", "ensemble", "student"}) {
        if (r.contains(model) && !r[model].is_null()) {
          const double miou = r[model].value("miou", 0.0);
          csv << name << ',' << mode << ',' << seed << ',' << round << ',' << model << ','
              << miou << '\n';
          if (std::string(model) == "student") s.points.emplace_back(round, miou);
        }
      }
    }
    if (!s.points.empty()) series.push_back(std::move(s));
  }
  dmx::write_svg_line_chart(base + "/report.svg", "student mIoU by round", "round", "mIoU",
                            series);
  std::printf("wrote %s/comparison.csv and %s/report.svg\n", base.c_str(), base.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-level domain-mixing SSDA pipeline"};
  app.require_subcommand(1);

  FlagOverrides gen_flags, run_flags, vst_flags;
  std::string eval_ckpt, eval_data, report_out = ".";
  std::vector<std::string> report_dirs;

  CLI::App* gen = app.add_subcommand("gen-data", "generate DMX1 dataset files");
  gen_flags.attach(gen);
  CLI::App* run = app.add_subcommand("run", "run the iterative framework");
  run_flags.attach(run);
  CLI::App* vst = app.add_subcommand("vanilla-st", "run the vanilla self-training comparison");
  vst_flags.attach(vst);
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset file");
  ev->add_option("--checkpoint", eval_ckpt, "DMCK checkpoint")->required();
  ev->add_option("--data", eval_data, "DMX1 dataset with labels")->required();
  CLI::App* rep = app.add_subcommand("report", "aggregate run directories");
  rep->add_option("dirs", report_dirs, "run directories")->required();
  rep->add_option("--out", report_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_flags);
    if (run->parsed()) return cmd_run(run_flags);
    if (vst->parsed()) return cmd_vanilla_st(vst_flags);
    if (ev->parsed()) return cmd_eval(eval_ckpt, eval_data);
    if (rep->parsed()) return cmd_report(report_dirs, report_out);
  } catch (const dmx::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const dmx::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.kind() == dmx::IoErrorKind::open_failed ? kExitIo : kExitFormat;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInternal;
  }
  return 0;
}
