#include "dphoi/trainer.hpp"

#include "dphoi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace dphoi {

void to_json(nlohmann::json& j, const OptimizerConfig& o) {
  j = nlohmann::json{{"lr", o.lr},
                     {"weight_decay", o.weight_decay},
                     {"beta1", o.beta1},
                     {"beta2", o.beta2},
                     {"eps", o.eps},
                     {"decay_fraction", o.decay_fraction},
                     {"decay_factor", o.decay_factor},
                     {"grad_clip", o.grad_clip}};
}

void from_json(const nlohmann::json& j, OptimizerConfig& o) {
  const OptimizerConfig d;
  o.lr = j.value("lr", d.lr);
  o.weight_decay = j.value("weight_decay", d.weight_decay);
  o.beta1 = j.value("beta1", d.beta1);
  o.beta2 = j.value("beta2", d.beta2);
  o.eps = j.value("eps", d.eps);
  o.decay_fraction = j.value("decay_fraction", d.decay_fraction);
  o.decay_factor = j.value("decay_factor", d.decay_factor);
  o.grad_clip = j.value("grad_clip", d.grad_clip);
}

AdamW::AdamW(ParamStore& params, OptimizerConfig config, std::uint64_t total_steps)
    : params_(params), config_(config), total_steps_(total_steps) {
  for (const auto& p : params_.entries()) {
    m_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
    v_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
  }
}

double AdamW::lr_at(std::uint64_t step) const {
  const auto decay_at = static_cast<std::uint64_t>(std::floor(config_.decay_fraction * static_cast<double>(total_steps_)));
  return step >= decay_at ? config_.lr * config_.decay_factor : config_.lr;
}

double AdamW::step(std::uint64_t step) {
  auto& entries = params_.entries();
  double sq = 0.0;
  for (const auto& p : entries) sq += p.var.grad().squaredNorm();
  const double norm = std::sqrt(sq);
  const double clip = config_.grad_clip > 0.0 && norm > config_.grad_clip ? config_.grad_clip / norm : 1.0;

  ++t_;
  const double lr = lr_at(step);
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& var = entries[i].var;
    const Matrix g = var.grad() * clip;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    Matrix& w = var.mutable_value();
    w *= 1.0 - lr * config_.weight_decay;
    w.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.eps);
  }
  return norm;
}

void to_json(nlohmann::json& j, const SyntheticConfig& s) {
  j = nlohmann::json{{"detection_images", s.detection_images},
                     {"action_images", s.action_images},
                     {"action_videos", s.action_videos},
                     {"captions", s.captions},
                     {"frames_per_video", s.frames_per_video},
                     {"min_boxes", s.min_boxes},
                     {"max_boxes", s.max_boxes},
                     {"canvas", {s.canvas.height, s.canvas.width}}};
}

void from_json(const nlohmann::json& j, SyntheticConfig& s) {
  const SyntheticConfig d;
  s.detection_images = j.value("detection_images", d.detection_images);
  s.action_images = j.value("action_images", d.action_images);
  s.action_videos = j.value("action_videos", d.action_videos);
  s.captions = j.value("captions", d.captions);
  s.frames_per_video = j.value("frames_per_video", d.frames_per_video);
  s.min_boxes = j.value("min_boxes", d.min_boxes);
  s.max_boxes = j.value("max_boxes", d.max_boxes);
  if (j.contains("canvas")) {
    const auto hw = j.at("canvas").get<std::vector<int>>();
    if (hw.size() != 2) throw ConfigError("synthetic.canvas must be [height, width]");
    s.canvas = {hw[0], hw[1]};
  }
}

void RunConfig::validate() const {
  std::vector<std::string> problems;
  try {
    model.validate();
  } catch (const ConfigError& e) {
    problems.emplace_back(e.what());
  }
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) problems.push_back(msg);
  };
  check(total_steps > 0, "total_steps must be positive");
  check(optimizer.lr > 0.0, "optimizer.lr must be positive");
  check(optimizer.weight_decay >= 0.0, "optimizer.weight_decay must be non-negative");
  check(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0, "optimizer.beta1 must be in [0, 1)");
  check(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0, "optimizer.beta2 must be in [0, 1)");
  check(optimizer.eps > 0.0, "optimizer.eps must be positive");
  check(optimizer.decay_fraction >= 0.0 && optimizer.decay_fraction <= 1.0, "optimizer.decay_fraction must be in [0, 1]");
  check(optimizer.decay_factor > 0.0, "optimizer.decay_factor must be positive");
  check(optimizer.grad_clip >= 0.0, "optimizer.grad_clip must be non-negative");
  check(no_object_weight > 0.0, "no_object_weight must be positive");
  check(focal.alpha > 0.0 && focal.alpha < 1.0, "focal.alpha must be in (0, 1)");
  check(focal.gamma >= 0.0, "focal.gamma must be non-negative");
  check(dn.noise_scale >= 0.0, "dn.noise_scale must be non-negative");
  check(dn.label_flip_prob >= 0.0 && dn.label_flip_prob <= 1.0, "dn.label_flip_prob must be in [0, 1]");
  check(num_frames > 0, "num_frames must be positive");
  check(bank_clusters > 0, "bank_clusters must be positive");
  check(bank_per_cluster > 0, "bank_per_cluster must be positive");
  check(plan.batch_size > 0 && plan.ratio_sum() > 0, "plan needs a positive batch size and ratio");
  if (early_plan) check(early_plan->batch_size > 0 && early_plan->ratio_sum() > 0, "early_plan needs a positive batch size and ratio");
  check(!early_plan || action_start_step > 0, "early_plan is set but action_start_step is 0");
  for (const auto& [name, w] : {std::pair{"box", weights.box}, {"giou", weights.giou}, {"cls", weights.cls},
                                {"action", weights.action}, {"caption", weights.caption}, {"verb_branch", weights.verb_branch}}) {
    check(w >= 0.0 && std::isfinite(w), std::string("weights.") + name + " must be finite and non-negative");
  }
  if (!manifest) {
    const auto& s = synthetic;
    check(s.canvas.height >= 16 && s.canvas.width >= 16, "synthetic.canvas must be at least 16x16");
    check(s.canvas.height % model.patch_size() == 0 && s.canvas.width % model.patch_size() == 0,
          "synthetic.canvas must be a multiple of the patch size " + std::to_string(model.patch_size()));
    check(s.detection_images >= 0 && s.action_images >= 0 && s.action_videos >= 0 && s.captions >= 0,
          "synthetic counts must be non-negative");
    check(s.frames_per_video > 0, "synthetic.frames_per_video must be positive");
    check(s.min_boxes >= 0 && s.max_boxes >= s.min_boxes, "synthetic box range is invalid");
    check(model.num_object_classes >= 2, "synthetic data needs at least two object classes");
    const int action_sets = (s.action_images > 0 ? 1 : 0) + (s.action_videos > 0 ? 1 : 0);
    check(model.num_verb_classes >= action_sets, "too few verb classes to split between action datasets");
  }
  if (!problems.empty()) {
    std::string msg = "invalid run config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

BranchOptions RunConfig::branch_options() const {
  BranchOptions o;
  o.weights = weights;
  o.no_object_weight = no_object_weight;
  o.focal = focal;
  o.fusion = fusion;
  o.dn = dn;
  return o;
}

std::vector<std::pair<std::uint64_t, BatchPlan>> RunConfig::plan_schedule() const {
  if (early_plan && action_start_step > 0) return {{0, *early_plan}, {action_start_step, plan}};
  return {{0, plan}};
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json::object();
  j["model"] = c.model;
  j["manifest"] = c.manifest ? nlohmann::json(*c.manifest) : nlohmann::json(nullptr);
  j["synthetic"] = c.synthetic;
  j["plan"] = c.plan;
  j["early_plan"] = c.early_plan ? nlohmann::json(*c.early_plan) : nlohmann::json(nullptr);
  j["action_start_step"] = c.action_start_step;
  j["weights"] = c.weights;
  j["no_object_weight"] = c.no_object_weight;
  j["focal"] = {{"alpha", c.focal.alpha}, {"gamma", c.focal.gamma}};
  j["fusion"] = std::string(to_string(c.fusion));
  j["dn"] = {{"enabled", c.dn.enabled}, {"noise_scale", c.dn.noise_scale}, {"label_flip_prob", c.dn.label_flip_prob}};
  j["optimizer"] = c.optimizer;
  j["total_steps"] = c.total_steps;
  j["checkpoint_every"] = c.checkpoint_every;
  j["num_frames"] = c.num_frames;
  j["bank"] = {{"clusters", c.bank_clusters}, {"per_cluster", c.bank_per_cluster},
               {"resample_per_batch", c.resample_negatives_per_batch}};
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  static const std::vector<std::string> known{
      "model", "manifest", "synthetic", "plan", "early_plan", "action_start_step", "weights", "no_object_weight",
      "focal", "fusion", "dn", "optimizer", "total_steps", "checkpoint_every", "num_frames", "bank", "seed",
      "output_dir"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw ConfigError("unknown run config key '" + key + "'");
  }
  const RunConfig d;
  c = d;
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("manifest") && !j.at("manifest").is_null()) c.manifest = j.at("manifest").get<std::string>();
  if (j.contains("synthetic")) c.synthetic = j.at("synthetic").get<SyntheticConfig>();
  if (j.contains("plan")) c.plan = j.at("plan").get<BatchPlan>();
  if (j.contains("early_plan") && !j.at("early_plan").is_null()) c.early_plan = j.at("early_plan").get<BatchPlan>();
  c.action_start_step = j.value("action_start_step", d.action_start_step);
  if (j.contains("weights")) c.weights = j.at("weights").get<LossWeights>();
  c.no_object_weight = j.value("no_object_weight", d.no_object_weight);
  if (j.contains("focal")) {
    c.focal.alpha = j.at("focal").value("alpha", d.focal.alpha);
    c.focal.gamma = j.at("focal").value("gamma", d.focal.gamma);
  }
  if (j.contains("fusion")) c.fusion = fusion_mode_from_string(j.at("fusion").get<std::string>());
  if (j.contains("dn")) {
    const auto& dn = j.at("dn");
    c.dn.enabled = dn.value("enabled", d.dn.enabled);
    c.dn.noise_scale = dn.value("noise_scale", d.dn.noise_scale);
    c.dn.label_flip_prob = dn.value("label_flip_prob", d.dn.label_flip_prob);
  }
  if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<OptimizerConfig>();
  c.total_steps = j.value("total_steps", d.total_steps);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.num_frames = j.value("num_frames", d.num_frames);
  if (j.contains("bank")) {
    const auto& b = j.at("bank");
    c.bank_clusters = b.value("clusters", d.bank_clusters);
    c.bank_per_cluster = b.value("per_cluster", d.bank_per_cluster);
    c.resample_negatives_per_batch = b.value("resample_per_batch", d.resample_negatives_per_batch);
  }
  c.seed = j.value("seed", d.seed);
  c.output_dir = j.value("output_dir", d.output_dir);
}

std::string RunConfig::hash() const {
  // where the run writes is not part of what it computes
  nlohmann::json j = *this;
  j.erase("output_dir");
  const std::string text = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (char ch : text) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);  // comments allowed
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  try {
    return j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

Manifest synthetic_manifest(const RunConfig& config) {
  const auto& s = config.synthetic;
  const auto& m = config.model;
  Manifest out;
  auto take = [&](std::vector<Record> records) {
    for (auto& r : records) out.records.push_back(std::move(r));
  };
  std::uint64_t seed = config.seed * 1000003ULL;

  if (s.detection_images > 0) {
    SyntheticDetectionOptions o;
    o.num_object_classes = m.num_object_classes;
    o.person_class_id = m.person_class_id;
    o.min_boxes = s.min_boxes;
    o.max_boxes = s.max_boxes;
    o.canvas = s.canvas;
    out.datasets.push_back({o.dataset, DatasetKind::detection, {}, o.person_class_id, 1.0});
    take(generate_synthetic_detection(s.detection_images, o, ++seed));
  }

  const int C = m.num_verb_classes;
  const bool split = s.action_images > 0 && s.action_videos > 0;
  std::vector<int> image_verbs, video_verbs;
  for (int v = 0; v < C; ++v) (split && v >= C / 2 ? video_verbs : image_verbs).push_back(v);
  if (!split) video_verbs = image_verbs;

  if (s.action_images > 0) {
    SyntheticActionOptions o;
    o.dataset = "synthetic-act";
    o.kind = DatasetKind::action_image;
    o.verb_classes = image_verbs;
    o.num_object_classes = m.num_object_classes;
    o.person_class_id = m.person_class_id;
    o.canvas = s.canvas;
    out.datasets.push_back({o.dataset, o.kind, o.verb_classes, o.person_class_id, 1.0});
    take(generate_synthetic_actions(s.action_images, o, ++seed));
  }
  if (s.action_videos > 0) {
    SyntheticActionOptions o;
    o.dataset = "synthetic-vid";
    o.kind = DatasetKind::action_video;
    o.verb_classes = video_verbs;
    o.num_object_classes = m.num_object_classes;
    o.person_class_id = m.person_class_id;
    o.num_frames = s.frames_per_video;
    o.canvas = s.canvas;
    out.datasets.push_back({o.dataset, o.kind, o.verb_classes, o.person_class_id, 1.0});
    take(generate_synthetic_actions(s.action_videos, o, ++seed));
  }
  if (s.captions > 0) {
    SyntheticCaptionOptions o;
    o.num_object_classes = m.num_object_classes;
    o.person_class_id = m.person_class_id;
    o.canvas = s.canvas;
    out.datasets.push_back({o.dataset, DatasetKind::caption, {}, o.person_class_id, 1.0});
    auto records = generate_synthetic_captions(s.captions, o, ++seed);
    for (auto& r : records) {
      if (r.triplets.empty()) {
        ++out.filtered["no HOI triplet could be extracted from the caption"];
      } else {
        out.records.push_back(std::move(r));
      }
    }
  }
  return out;
}

// ---- trainer ----

Trainer::Trainer(RunConfig config, Manifest data)
    : config_(std::move(config)), data_(std::move(data)), text_encoder_(config_.model.proj_dim, config_.seed),
      rng_(config_.seed ^ 0x5DEECE66DULL) {
  config_.validate();
  validate_datasets(data_.datasets, config_.model.num_verb_classes, /*require_full_cover=*/false);
  model_ = std::make_unique<Model>(config_.model);
  stream_ = std::make_unique<BatchStream>(make_batch_stream(data_, config_.plan_schedule(), config_.seed));
  optimizer_ = std::make_unique<AdamW>(model_->params(), config_.optimizer, config_.total_steps);

  std::vector<std::string> ids, prompts;
  for (const auto& r : data_.records) {
    if (r.kind != DatasetKind::caption) continue;
    for (std::size_t k = 0; k < r.triplets.size(); ++k) {
      ids.push_back(triplet_id(r.id, k));
      prompts.push_back(template_prompt(r.triplets[k]));
    }
  }
  if (!ids.empty()) {
    const Matrix emb = embed_texts(prompts, text_encoder_);
    bank_ = build_negative_bank(ids, prompts, emb, config_.bank_clusters, config_.bank_per_cluster, config_.seed);
  }
}

namespace {

ag::Var sum_or_zero(const std::vector<ag::Var>& terms, double scale) {
  if (terms.empty()) return {};
  ag::Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ag::add(total, terms[i]);
  return ag::scale(total, scale);
}

ag::Var add_defined(const ag::Var& a, const ag::Var& b) {
  if (!a.defined()) return b;
  if (!b.defined()) return a;
  return ag::add(a, b);
}

double value_or_zero(const ag::Var& v) { return v.defined() ? v.item() : 0.0; }

VerbTarget verb_target_for(const Record& r, const DatasetSpec& spec, int num_verb_classes) {
  VerbTarget t;
  t.mask = spec.verb_mask(num_verb_classes);
  t.multi_hot.assign(static_cast<std::size_t>(num_verb_classes), 0.0);
  for (int v : r.verbs) t.multi_hot.at(static_cast<std::size_t>(v)) = 1.0;
  return t;
}

}  // namespace

StepResult Trainer::step() {
  const Batch batch = stream_->next();
  return run_batch(batch, true);
}

StepResult Trainer::evaluate_batch(const Batch& batch) { return run_batch(batch, false); }

StepResult Trainer::run_batch(const Batch& batch, bool train) {
  const BranchOptions options = config_.branch_options();
  const ModelConfig& mc = model_->config();
  StepResult result;
  result.step = batch.step;
  result.counts.items = batch.items.size();

  std::vector<ag::Var> l1, giou, ce, dn_l1, dn_giou, dn_ce, action;
  Index num_boxes = 0, num_dn_boxes = 0;

  struct PendingCaption {
    CaptionBranchResult selection;
    std::vector<CaptionTarget> targets;
  };
  std::vector<PendingCaption> captions;
  if (bank_ && config_.resample_negatives_per_batch) bank_->resample(config_.seed + batch.step + 1);

  for (const BatchItem& item : batch.items) {
    const Record& r = stream_->record(item);
    const DatasetSpec& spec = stream_->specs()[item.dataset];
    switch (r.kind) {
      case DatasetKind::detection: {
        ++result.counts.detection;
        DetectionTargets targets{r.boxes, r.labels};
        DetectionBranchResult d = run_detection_branch(*model_, r.image(), targets, options, train ? &rng_ : nullptr);
        l1.push_back(d.l1_sum);
        giou.push_back(d.giou_sum);
        ce.push_back(d.ce);
        num_boxes += d.num_boxes;
        if (d.dn_boxes > 0) {
          dn_l1.push_back(d.dn_l1_sum);
          dn_giou.push_back(d.dn_giou_sum);
          dn_ce.push_back(d.dn_ce);
          num_dn_boxes += d.dn_boxes;
        }
        break;
      }
      case DatasetKind::action_image:
      case DatasetKind::action_video: {
        ++result.counts.action;
        const VerbTarget target = verb_target_for(r, spec, mc.num_verb_classes);
        VerbBranchResult v;
        if (r.kind == DatasetKind::action_video) {
          std::vector<Image> frames;
          for (int i : sample_frame_indices(static_cast<int>(r.frames.size()), config_.num_frames, rng_)) {
            frames.push_back(r.frames[static_cast<std::size_t>(i)]);
          }
          v = run_verb_branch_video(*model_, frames, target, options);
        } else {
          v = run_verb_branch_image(*model_, r.image(), target, options);
        }
        if (v.skipped) {
          ++result.counts.skipped_action;
        } else {
          action.push_back(v.loss);
        }
        break;
      }
      case DatasetKind::caption: {
        ++result.counts.caption;
        PendingCaption p;
        for (std::size_t k = 0; k < r.triplets.size(); ++k) {
          const Index idx = bank_->index_of(triplet_id(r.id, k));
          CaptionTarget t;
          t.prompt = bank_->prompts[static_cast<std::size_t>(idx)];
          t.positive = bank_->embeddings.row(idx);
          const auto negs = negatives_for(idx, *bank_);
          t.negatives.resize(static_cast<Index>(negs.size()), bank_->embeddings.cols());
          for (std::size_t n = 0; n < negs.size(); ++n) t.negatives.row(static_cast<Index>(n)) = bank_->embeddings.row(negs[n]);
          p.targets.push_back(std::move(t));
        }
        p.selection = select_caption_queries(*model_, r.image(), p.targets, options);
        if (p.selection.skipped) {
          ++result.counts.skipped_caption;
        } else {
          captions.push_back(std::move(p));
        }
        break;
      }
    }
  }

  // Text-to-image negatives: the selected embeddings of the other caption
  // samples in this batch.
  std::vector<ag::Var> caption_losses;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    std::vector<ag::Var> others;
    for (std::size_t k = 0; k < captions.size(); ++k) {
      if (k != i) others.push_back(captions[k].selection.selected_embeddings.front());
    }
    attach_caption_loss(captions[i].selection, captions[i].targets, others, mc.temperature);
    caption_losses.push_back(captions[i].selection.loss);
  }

  const double box_norm = 1.0 / static_cast<double>(std::max<Index>(num_boxes, 1));
  const double dn_norm = 1.0 / static_cast<double>(std::max<Index>(num_dn_boxes, 1));
  LossVars terms;
  const ag::Var dn_box = sum_or_zero(dn_l1, dn_norm);
  const ag::Var dn_g = sum_or_zero(dn_giou, dn_norm);
  const ag::Var dn_c = dn_ce.empty() ? ag::Var() : sum_or_zero(dn_ce, 1.0 / static_cast<double>(dn_ce.size()));
  terms.box = add_defined(sum_or_zero(l1, box_norm), dn_box);
  terms.giou = add_defined(sum_or_zero(giou, box_norm), dn_g);
  terms.cls = add_defined(ce.empty() ? ag::Var() : sum_or_zero(ce, 1.0 / static_cast<double>(ce.size())), dn_c);
  terms.action = action.empty() ? ag::Var() : sum_or_zero(action, 1.0 / static_cast<double>(action.size()));
  terms.caption = caption_losses.empty()
                      ? ag::Var()
                      : sum_or_zero(caption_losses, 1.0 / static_cast<double>(caption_losses.size()));

  result.report = compose_total(values_of(terms), config_.weights);
  result.dn_box = value_or_zero(dn_box);
  result.dn_giou = value_or_zero(dn_g);
  result.dn_cls = value_or_zero(dn_c);
  result.lr = optimizer_->lr_at(batch.step);

  if (train) {
    model_->params().zero_grad();
    const ag::Var total = weighted_total(terms, config_.weights);
    if (total.defined() && total.requires_grad()) ag::backward(total);
    result.grad_norm = optimizer_->step(batch.step);
    if (!std::isfinite(result.grad_norm)) throw NonFiniteError("non-finite gradient norm at step " + std::to_string(batch.step));
    ++step_;
  }
  return result;
}

nlohmann::json step_log_record(const StepResult& r, const RunConfig& config) {
  nlohmann::json j;
  j["step"] = r.step;
  j["config_hash"] = config.hash();
  j["fusion"] = std::string(to_string(config.fusion));
  j["L_b"] = r.report.terms.box;
  j["L_g"] = r.report.terms.giou;
  j["L_c"] = r.report.terms.cls;
  j["L_a"] = r.report.terms.action;
  j["L_s"] = r.report.terms.caption;
  j["L_d"] = r.report.detection;
  j["L_v"] = r.report.verb;
  j["total"] = r.report.total;
  j["dn"] = {{"L_b", r.dn_box}, {"L_g", r.dn_giou}, {"L_c", r.dn_cls}};
  j["lr"] = r.lr;
  j["grad_norm"] = r.grad_norm;
  j["counts"] = {{"items", r.counts.items},
                 {"detection", r.counts.detection},
                 {"action", r.counts.action},
                 {"caption", r.counts.caption},
                 {"processed", r.counts.processed()}};
  j["skipped"] = {{"action", r.counts.skipped_action}, {"caption", r.counts.skipped_caption}};
  return j;
}

TrainingMetrics evaluate_training_set(const Model& model, const Manifest& data, const BranchOptions& options) {
  ag::NoGradGuard no_grad;
  TrainingMetrics m;
  double iou_sum = 0.0;
  const ModelConfig& mc = model.config();
  for (const auto& r : data.records) {
    if (r.kind == DatasetKind::detection) {
      DetectionTargets targets{r.boxes, r.labels};
      const DetectionBranchResult d = run_detection_branch(model, r.image(), targets, options, nullptr);
      const Matrix& logits = d.predictions.object_logits.value();
      const Matrix& boxes = d.predictions.boxes.value();
      for (const auto& [q, t] : d.match.pairs) {
        Index arg = 0;
        logits.row(q).maxCoeff(&arg);
        ++m.detection_pairs;
        if (arg == r.labels[static_cast<std::size_t>(t)]) ++m.detection_correct;
        iou_sum += box_iou(to_xyxy(boxes(q, 0), boxes(q, 1), boxes(q, 2), boxes(q, 3)),
                           to_xyxy(r.boxes(t, 0), r.boxes(t, 1), r.boxes(t, 2), r.boxes(t, 3)));
      }
    } else if (group_of(r.kind) == KindGroup::action) {
      const DatasetSpec& spec = data.dataset(r.dataset);
      const VerbTarget target = verb_target_for(r, spec, mc.num_verb_classes);
      const VerbBranchResult v = run_verb_branch_video(model, r.frames, target, options);
      ++m.action_samples;
      if (v.skipped) {
        ++m.action_skipped;
        continue;
      }
      const Matrix scores = options.fusion == FusionMode::none ? Matrix(v.fused.value().colwise().maxCoeff())
                                                               : v.fused.value();
      Index best = -1;
      for (Index c = 0; c < scores.cols(); ++c) {
        if (!target.mask[static_cast<std::size_t>(c)]) continue;
        if (best < 0 || scores(0, c) > scores(0, best)) best = c;
      }
      if (best >= 0 && target.multi_hot[static_cast<std::size_t>(best)] > 0.5) ++m.action_correct;
    }
  }
  m.mean_iou = m.detection_pairs == 0 ? 0.0 : iou_sum / static_cast<double>(m.detection_pairs);
  return m;
}

}  // namespace dphoi
