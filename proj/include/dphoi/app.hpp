#pragma once

// Command implementations shared by the CLI and the Python module.

#include "dphoi/trainer.hpp"
#include "dphoi/transfer.hpp"

#include "json.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace dphoi {

// Relative directories resolve under $DPHOI_OUTPUT_ROOT when it is set.
std::filesystem::path resolve_output_dir(const std::string& dir);

struct PretrainSummary {
  std::uint64_t steps = 0;
  double initial_total = 0.0;
  double final_total = 0.0;
  std::size_t items = 0;      // records delivered by the stream
  std::size_t processed = 0;
  std::size_t skipped = 0;
  std::filesystem::path output_dir;
  std::filesystem::path log_path;
  std::filesystem::path final_checkpoint;
};

void to_json(nlohmann::json& j, const PretrainSummary& s);

// Writes config.json, manifest.jsonl, loss_log.jsonl, checkpoints/ and
// summary.json under the resolved output directory. Throws NonFiniteError as
// soon as a loss or gradient is not finite (the log keeps the steps so far).
PretrainSummary run_pretrain(const RunConfig& config, std::ostream* progress = nullptr);

// Manifest for a config: the referenced file, or the synthetic corpus.
Manifest load_training_data(const RunConfig& config);

struct ProbeOptions {
  std::optional<double> threshold;  // defaults to the model's
  FusionMode fusion = FusionMode::max;
  bool attention = true;
};

// {"threshold", "person_scores", "rpq": {"indices", "scores", "empty"},
//  "verb_scores", "fused", "grid", "attention": {"detection", "interaction"}}
// Attention tensors are [layer][head][query][token]. An empty RPQ set is
// reported, not an error.
nlohmann::json probe_image(const Model& model, const Image& image, const ProbeOptions& options = {});

// ---- loss curves ----

struct LossSeries {
  std::string label;
  std::vector<std::uint64_t> steps;
  std::map<std::string, std::vector<double>> columns;  // total, L_b, L_g, L_c, L_a, L_s
};

const std::vector<std::string>& loss_columns();

// Throws DataError naming every malformed line.
LossSeries read_loss_log(const std::filesystem::path& path, std::string label = "");
// Trailing moving average; window 1 returns the input.
std::vector<double> smooth(const std::vector<double>& values, int window);

void write_loss_table(const std::vector<LossSeries>& runs, int window, std::ostream& out);
std::string render_loss_svg(const std::vector<LossSeries>& runs, int window, const std::string& column = "total");

}  // namespace dphoi
