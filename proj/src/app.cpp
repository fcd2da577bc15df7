#include "dphoi/app.hpp"

#include "dphoi/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace dphoi {

std::filesystem::path resolve_output_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv("DPHOI_OUTPUT_ROOT"); root != nullptr && *root != '\0') {
      return std::filesystem::path(root) / p;
    }
  }
  return p;
}

void to_json(nlohmann::json& j, const PretrainSummary& s) {
  j = nlohmann::json{{"steps", s.steps},
                     {"initial_total", s.initial_total},
                     {"final_total", s.final_total},
                     {"items", s.items},
                     {"processed", s.processed},
                     {"skipped", s.skipped},
                     {"log", s.log_path.string()},
                     {"final_checkpoint", s.final_checkpoint.string()}};
}

Manifest load_training_data(const RunConfig& config) {
  if (config.manifest) return ingest_manifest(*config.manifest);
  return synthetic_manifest(config);
}

namespace {

std::string step_name(std::uint64_t step) {
  std::ostringstream s;
  s << "step_" << std::setw(7) << std::setfill('0') << step << ".ckpt";
  return s.str();
}

}  // namespace

PretrainSummary run_pretrain(const RunConfig& config, std::ostream* progress) {
  config.validate();
  PretrainSummary summary;
  summary.output_dir = resolve_output_dir(config.output_dir);
  std::filesystem::create_directories(summary.output_dir / "checkpoints");
  {
    std::ofstream out(summary.output_dir / "config.json");
    out << nlohmann::json(config).dump(2) << '\n';
  }
  Manifest data = load_training_data(config);
  write_manifest(data, summary.output_dir / "manifest.jsonl");

  Trainer trainer(config, std::move(data));
  summary.log_path = summary.output_dir / "loss_log.jsonl";
  std::ofstream log(summary.log_path);
  if (!log) throw DataError("cannot write " + summary.log_path.string());

  const nlohmann::json hash_meta{{"config_hash", config.hash()}};
  for (std::uint64_t s = 0; s < config.total_steps; ++s) {
    const StepResult r = trainer.step();
    log << step_log_record(r, config).dump() << '\n';
    log.flush();
    if (s == 0) summary.initial_total = r.report.total;
    summary.final_total = r.report.total;
    summary.items += r.counts.items;
    summary.processed += r.counts.processed();
    summary.skipped += r.counts.skipped();
    ++summary.steps;
    if (config.checkpoint_every > 0 && (s + 1) % config.checkpoint_every == 0 && s + 1 < config.total_steps) {
      save_checkpoint(snapshot(trainer.model(), s + 1, hash_meta), summary.output_dir / "checkpoints" / step_name(s + 1));
    }
    if (progress != nullptr && ((s + 1) % 25 == 0 || s + 1 == config.total_steps)) {
      *progress << "step " << (s + 1) << "/" << config.total_steps << " total " << r.report.total << '\n';
    }
  }
  if (summary.processed + summary.skipped != summary.items) {
    throw StateError("batch accounting mismatch: " + std::to_string(summary.processed) + " processed + " +
                     std::to_string(summary.skipped) + " skipped != " + std::to_string(summary.items) + " delivered");
  }
  summary.final_checkpoint = summary.output_dir / "final.ckpt";
  save_checkpoint(snapshot(trainer.model(), summary.steps, hash_meta), summary.final_checkpoint);
  std::ofstream out(summary.output_dir / "summary.json");
  out << nlohmann::json(summary).dump(2) << '\n';
  return summary;
}

namespace {

nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    rows.push_back(std::vector<double>(m.row(i).data(), m.row(i).data() + m.cols()));
  }
  return rows;
}

nlohmann::json attention_json(const DecoderState& state) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : state.attention) {
    nlohmann::json heads = nlohmann::json::array();
    for (const auto& head : layer) heads.push_back(matrix_json(head));
    layers.push_back(std::move(heads));
  }
  return layers;
}

}  // namespace

nlohmann::json probe_image(const Model& model, const Image& image, const ProbeOptions& options) {
  ag::NoGradGuard no_grad;
  const ModelConfig& cfg = model.config();
  const double threshold = options.threshold.value_or(cfg.rpq_threshold);
  const PersonQueryPass pass = run_person_queries(model, image, threshold);

  nlohmann::json j;
  j["threshold"] = threshold;
  j["fusion"] = std::string(to_string(options.fusion));
  j["grid"] = {pass.encoder.grid_height, pass.encoder.grid_width};
  j["person_scores"] = person_scores(pass.detection.object_logits.value(), cfg.person_class_id);
  j["boxes"] = matrix_json(pass.detection.boxes.value());
  j["rpq"] = {{"indices", pass.rpq.indices}, {"scores", pass.rpq.person_scores}, {"empty", pass.rpq.empty()}};
  if (pass.interaction_state) {
    const Predictions verbs = model.predict_heads(*pass.interaction_state, HeadKind::verb);
    const Matrix scores = ag::sigmoid(verbs.verb_logits).value();
    j["verb_scores"] = matrix_json(scores);
    const FusedVerbPrediction fused = fuse_verb_predictions(scores, options.fusion);
    j["fused"] = std::vector<double>(fused.scores.data(), fused.scores.data() + fused.scores.size());
  } else {
    j["verb_scores"] = nlohmann::json::array();
    j["fused"] = nlohmann::json::array();
  }
  if (options.attention) {
    j["attention"]["detection"] = attention_json(pass.detection_state);
    j["attention"]["interaction"] =
        pass.interaction_state ? attention_json(*pass.interaction_state) : nlohmann::json::array();
  }
  return j;
}

// ---- loss curves ----

const std::vector<std::string>& loss_columns() {
  static const std::vector<std::string> cols{"total", "L_b", "L_g", "L_c", "L_a", "L_s"};
  return cols;
}

LossSeries read_loss_log(const std::filesystem::path& path, std::string label) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read loss log " + path.string());
  LossSeries s;
  s.label = label.empty() ? path.parent_path().filename().string() : std::move(label);
  if (s.label.empty()) s.label = path.stem().string();
  std::vector<std::string> problems;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto step = j.at("step").get<std::uint64_t>();
      std::vector<double> values;
      for (const auto& c : loss_columns()) {
        const double v = j.at(c).get<double>();
        if (!std::isfinite(v)) throw DataError("non-finite " + c);
        values.push_back(v);
      }
      s.steps.push_back(step);
      for (std::size_t k = 0; k < values.size(); ++k) s.columns[loss_columns()[k]].push_back(values[k]);
    } catch (const std::exception& e) {
      problems.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = path.string() + " has malformed lines:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw DataError(msg);
  }
  if (s.steps.empty()) throw DataError(path.string() + " is empty");
  return s;
}

std::vector<double> smooth(const std::vector<double>& values, int window) {
  if (window < 1) throw ConfigError("smoothing window must be at least 1");
  if (window == 1) return values;
  std::vector<double> out(values.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    sum += values[i];
    if (i >= static_cast<std::size_t>(window)) sum -= values[i - static_cast<std::size_t>(window)];
    out[i] = sum / static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window)));
  }
  return out;
}

namespace {

std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

void write_loss_table(const std::vector<LossSeries>& runs, int window, std::ostream& out) {
  out << "run,step";
  for (const auto& c : loss_columns()) out << ',' << c;
  out << '\n';
  for (const auto& run : runs) {
    std::map<std::string, std::vector<double>> smoothed;
    for (const auto& c : loss_columns()) smoothed[c] = smooth(run.columns.at(c), window);
    for (std::size_t i = 0; i < run.steps.size(); ++i) {
      out << run.label << ',' << run.steps[i];
      for (const auto& c : loss_columns()) out << ',' << shortest(smoothed[c][i]);
      out << '\n';
    }
  }
}

std::string render_loss_svg(const std::vector<LossSeries>& runs, int window, const std::string& column) {
  if (runs.empty()) throw DataError("nothing to plot");
  if (std::find(loss_columns().begin(), loss_columns().end(), column) == loss_columns().end()) {
    throw ConfigError("unknown loss column '" + column + "'");
  }
  constexpr double W = 640, H = 400, left = 60, right = 20, top = 30, bottom = 50;
  static const std::vector<std::string> colors{"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::vector<std::vector<double>> ys;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& run : runs) {
    ys.push_back(smooth(run.columns.at(column), window));
    for (double y : ys.back()) {
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
    xmin = std::min(xmin, static_cast<double>(run.steps.front()));
    xmax = std::max(xmax, static_cast<double>(run.steps.back()));
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * (W - left - right); };
  auto py = [&](double y) { return H - bottom - (y - ymin) / (ymax - ymin) * (H - top - bottom); };

  std::ostringstream svg;
  svg << std::setprecision(6);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
      << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double yv = ymin + (ymax - ymin) * t / 4.0;
    const double xv = xmin + (xmax - xmin) * t / 4.0;
    svg << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << yv
        << "</text>\n";
    svg << "<text x=\"" << px(xv) << "\" y=\"" << H - bottom + 16 << "\" font-size=\"11\" text-anchor=\"middle\">"
        << std::llround(xv) << "</text>\n";
  }
  svg << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 10 << "\" font-size=\"12\" text-anchor=\"middle\">step</text>\n";
  svg << "<text x=\"14\" y=\"" << (top + H - bottom) / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
      << (top + H - bottom) / 2 << ")\">" << column << "</text>\n";
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const std::string& color = colors[r % colors.size()];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < runs[r].steps.size(); ++i) {
      svg << px(static_cast<double>(runs[r].steps[i])) << ',' << py(ys[r][i]) << ' ';
    }
    svg << "\"/>\n";
    svg << "<text x=\"" << W - right - 4 << "\" y=\"" << top + 14 * static_cast<double>(r) << "\" font-size=\"12\" text-anchor=\"end\" fill=\""
        << color << "\">" << runs[r].label << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace dphoi
