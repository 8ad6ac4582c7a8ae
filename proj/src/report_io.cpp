#include "dmx/report_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dmx/io_error.hpp"

namespace dmx {

namespace {

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(precision);
  os << v;
  return os.str();
}

void emit_row(std::ostream& os, int round, const char* stage, const char* model,
              std::uint64_t seed, const EvalResult& r) {
  os << round << ',' << stage << ',' << model << ',' << seed << ',' << fmt(r.miou);
  for (const auto& iou : r.class_iou) {
    os << ',';
    if (iou) os << fmt(*iou);
  }
  os << '\n';
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError(IoErrorKind::open_failed, "cannot open " + path + " for writing");
  return os;
}

}  // namespace

void write_metrics_csv(const std::string& path, const RunConfig& config,
                       const std::vector<RoundReport>& reports) {
  std::ofstream os = open_out(path);
  os << "round,stage,model,seed,miou";
  for (int c = 0; c < kNumClasses; ++c) os << ",iou_" << c;
  os << '\n';
  for (const RoundReport& r : reports) {
    if (r.teacher_rl) emit_row(os, r.round, "teachers", "teacher_RL", config.master_seed, *r.teacher_rl);
    if (r.teacher_sl) emit_row(os, r.round, "teachers", "teacher_SL", config.master_seed, *r.teacher_sl);
    if (r.ensemble) emit_row(os, r.round, "ensemble", "ensemble", config.master_seed, *r.ensemble);
    if (r.student) emit_row(os, r.round, "distill", "student", config.master_seed, *r.student);
  }
}

void write_losses_csv(const std::string& path, const std::vector<RoundReport>& reports) {
  std::ofstream os = open_out(path);
  os << "round,model,iter,loss\n";
  auto dump = [&](int round, const char* model, const std::vector<std::pair<int, float>>& c) {
    for (const auto& [it, loss] : c)
      os << round << ',' << model << ',' << it << ',' << fmt(loss) << '\n';
  };
  for (const RoundReport& r : reports) {
    dump(r.round, "teacher_RL", r.rl_curve);
    dump(r.round, "teacher_SL", r.sl_curve);
    dump(r.round, "student", r.student_curve);
  }
}

void write_run_json(const std::string& path, const RunConfig& config,
                    const std::vector<RoundReport>& reports) {
  nlohmann::json j;
  nlohmann::json cfg = nlohmann::json::object();
  for (const auto& [k, v] : config_items(config)) cfg[k] = v;
  j["config"] = cfg;
  j["num_classes"] = kNumClasses;
  j["student_init"] = "fresh_random_per_round";

  auto eval_json = [](const std::optional<EvalResult>& e) -> nlohmann::json {
    if (!e) return nullptr;
    nlohmann::json out;
    out["miou"] = e->miou;
    nlohmann::json ious = nlohmann::json::array();
    for (const auto& iou : e->class_iou)
      ious.push_back(iou ? nlohmann::json(*iou) : nlohmann::json(nullptr));
    out["class_iou"] = ious;
    return out;
  };

  nlohmann::json rounds = nlohmann::json::array();
  for (const RoundReport& r : reports) {
    nlohmann::json jr;
    jr["round"] = r.round;
    jr["teacher_rl"] = eval_json(r.teacher_rl);
    jr["teacher_sl"] = eval_json(r.teacher_sl);
    jr["ensemble"] = eval_json(r.ensemble);
    jr["student"] = eval_json(r.student);
    jr["teacher_rl_loss"] = r.teacher_rl_loss;
    jr["teacher_sl_loss"] = r.teacher_sl_loss;
    jr["student_loss"] = r.student_loss;
    jr["pseudo_coverage"] = r.pseudo_coverage;
    jr["ckpt_rl"] = r.ckpt_rl;
    jr["ckpt_sl"] = r.ckpt_sl;
    jr["ckpt_student"] = r.ckpt_student;
    rounds.push_back(jr);
  }
  j["rounds"] = rounds;

  std::ofstream os = open_out(path);
  os << j.dump(2) << '\n';
}

void write_svg_line_chart(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<ChartSeries>& series) {
  const int width = 720, height = 440;
  const int ml = 64, mr = 180, mt = 48, mb = 52;
  const double pw = width - ml - mr, ph = height - mt - mb;

  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const ChartSeries& s : series)
    for (const auto& [x, y] : s.points) {
      if (first) {
        xmin = xmax = x;
        ymin = ymax = y;
        first = false;
      }
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (xmax - xmin < 1e-12) xmax = xmin + 1;
  const double ypad = std::max(0.02, (ymax - ymin) * 0.1);
  ymin = std::max(0.0, ymin - ypad);
  ymax += ypad;

  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };

  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

  std::ofstream os = open_out(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << height << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        "font-size=\"15\">"
     << title << "</text>\n";

  // axes + ticks
  os << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\""
     << mt + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double y = ymin + (ymax - ymin) * i / 5.0;
    os << "<line x1=\"" << ml - 4 << "\" y1=\"" << py(y) << "\" x2=\"" << ml + pw << "\" y2=\""
       << py(y) << "\" stroke=\"#dddddd\"/>\n";
    os << "<text x=\"" << ml - 8 << "\" y=\"" << py(y) + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(y, 3)
       << "</text>\n";
  }
  const int xticks = std::min<int>(8, static_cast<int>(std::lround(xmax - xmin)));
  for (int i = 0; i <= std::max(1, xticks); ++i) {
    const double x = xmin + (xmax - xmin) * i / std::max(1, xticks);
    os << "<text x=\"" << px(x) << "\" y=\"" << mt + ph + 18
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(x, 0)
       << "</text>\n";
  }
  os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 12
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << x_label
     << "</text>\n";
  os << "<text x=\"18\" y=\"" << mt + ph / 2
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 "
        "18 "
     << mt + ph / 2 << ")\">" << y_label << "</text>\n";

  int ci = 0;
  for (const ChartSeries& s : series) {
    const char* color = kColors[ci % 8];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : s.points) os << fmt(px(x), 1) << ',' << fmt(py(y), 1) << ' ';
    os << "\"/>\n";
    for (const auto& [x, y] : s.points)
      os << "<circle cx=\"" << fmt(px(x), 1) << "\" cy=\"" << fmt(py(y), 1)
         << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    const int ly = mt + 16 + ci * 18;
    os << "<line x1=\"" << ml + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << ml + pw + 32
       << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << ml + pw + 38 << "\" y=\"" << ly
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << s.name << "</text>\n";
    ++ci;
  }
  os << "</svg>\n";
}

}  // namespace dmx
