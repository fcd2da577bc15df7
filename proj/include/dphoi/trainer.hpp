#pragma once

// Run configuration, AdamW, and the mixed-batch pre-training step.

#include "dphoi/branches.hpp"
#include "dphoi/caption.hpp"
#include "dphoi/data.hpp"
#include "dphoi/model.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace dphoi {

struct OptimizerConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay_fraction = 0.9;  // lr *= decay_factor from this fraction of total steps on
  double decay_factor = 0.1;
  double grad_clip = 0.1;       // max global norm, 0 disables

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

void to_json(nlohmann::json& j, const OptimizerConfig& o);
void from_json(const nlohmann::json& j, OptimizerConfig& o);

class AdamW {
 public:
  AdamW(ParamStore& params, OptimizerConfig config, std::uint64_t total_steps);

  [[nodiscard]] double lr_at(std::uint64_t step) const;
  // Clips, updates every parameter from its accumulated gradient, and
  // returns the pre-clip global gradient norm.
  double step(std::uint64_t step);

 private:
  ParamStore& params_;
  OptimizerConfig config_;
  std::uint64_t total_steps_;
  std::vector<Matrix> m_, v_;
  std::uint64_t t_ = 0;
};

// Counts of the built-in synthetic corpus used when no manifest is given.
struct SyntheticConfig {
  int detection_images = 10;
  int action_images = 10;
  int action_videos = 0;
  int captions = 0;
  int frames_per_video = 4;
  int min_boxes = 1;
  int max_boxes = 3;
  SyntheticCanvas canvas;

  friend bool operator==(const SyntheticConfig&, const SyntheticConfig&) = default;
};

void to_json(nlohmann::json& j, const SyntheticConfig& s);
void from_json(const nlohmann::json& j, SyntheticConfig& s);

struct RunConfig {
  ModelConfig model;
  std::optional<std::string> manifest;  // otherwise `synthetic` is generated
  SyntheticConfig synthetic;
  BatchPlan plan = BatchPlan::parse("1:1", 8);
  // Plan used before `action_start_step` (action data joins late).
  std::optional<BatchPlan> early_plan;
  std::uint64_t action_start_step = 0;
  LossWeights weights;
  double no_object_weight = 0.1;
  FocalParams focal;
  FusionMode fusion = FusionMode::max;
  DnOptions dn;
  OptimizerConfig optimizer;
  std::uint64_t total_steps = 200;
  std::uint64_t checkpoint_every = 0;  // 0: final checkpoint only
  int num_frames = 4;                  // N_f
  int bank_clusters = 100;
  int bank_per_cluster = 10;
  bool resample_negatives_per_batch = false;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";

  // Throws ConfigError listing every problem.
  void validate() const;
  [[nodiscard]] BranchOptions branch_options() const;
  [[nodiscard]] std::vector<std::pair<std::uint64_t, BatchPlan>> plan_schedule() const;
  // Hex FNV-1a of the canonical JSON form, output_dir excluded.
  [[nodiscard]] std::string hash() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

// Dataset declarations and records of the built-in synthetic corpus. Verb ids
// are split between the image and video action datasets when both exist.
Manifest synthetic_manifest(const RunConfig& config);

struct StepCounts {
  std::size_t items = 0;            // records the stream delivered
  std::size_t detection = 0;
  std::size_t action = 0;
  std::size_t caption = 0;
  std::size_t skipped_action = 0;   // empty RPQ
  std::size_t skipped_caption = 0;

  [[nodiscard]] std::size_t processed() const { return detection + action + caption - skipped_action - skipped_caption; }
  [[nodiscard]] std::size_t skipped() const { return skipped_action + skipped_caption; }
};

struct StepResult {
  std::uint64_t step = 0;
  LossReport report;
  // Denoising parts already folded into box/giou/cls.
  double dn_box = 0.0, dn_giou = 0.0, dn_cls = 0.0;
  StepCounts counts;
  double grad_norm = 0.0;
  double lr = 0.0;
};

class Trainer {
 public:
  Trainer(RunConfig config, Manifest data);

  // One optimizer step on the next batch. Throws NonFiniteError on NaN/Inf.
  StepResult step();
  [[nodiscard]] std::uint64_t current_step() const { return step_; }

  [[nodiscard]] Model& model() { return *model_; }
  [[nodiscard]] const Model& model() const { return *model_; }
  [[nodiscard]] const RunConfig& config() const { return config_; }
  [[nodiscard]] const Manifest& data() const { return data_; }
  [[nodiscard]] const std::optional<NegativeBank>& bank() const { return bank_; }

  // Loss terms for one batch without updating parameters.
  StepResult evaluate_batch(const Batch& batch);

 private:
  StepResult run_batch(const Batch& batch, bool train);

  RunConfig config_;
  Manifest data_;
  std::unique_ptr<Model> model_;
  std::unique_ptr<BatchStream> stream_;
  std::unique_ptr<AdamW> optimizer_;
  HashingTextEncoder text_encoder_;
  std::optional<NegativeBank> bank_;
  std::mt19937_64 rng_;
  std::uint64_t step_ = 0;
};

nlohmann::json step_log_record(const StepResult& r, const RunConfig& config);

struct TrainingMetrics {
  std::size_t detection_pairs = 0;
  std::size_t detection_correct = 0;
  double mean_iou = 0.0;
  std::size_t action_samples = 0;
  std::size_t action_correct = 0;
  std::size_t action_skipped = 0;

  [[nodiscard]] double class_accuracy() const {
    return detection_pairs == 0 ? 0.0 : static_cast<double>(detection_correct) / static_cast<double>(detection_pairs);
  }
  [[nodiscard]] double verb_accuracy() const {
    return action_samples == 0 ? 0.0 : static_cast<double>(action_correct) / static_cast<double>(action_samples);
  }
};

// Detection: matched-pair class accuracy (argmax over all outputs) and mean
// IoU. Actions: the top fused score among the dataset's classes must be a
// labelled verb; skipped samples count as wrong.
TrainingMetrics evaluate_training_set(const Model& model, const Manifest& data, const BranchOptions& options);

}  // namespace dphoi
