#include "dphoi/branches.hpp"

#include "dphoi/errors.hpp"

#include <cmath>
#include <limits>
#include <optional>

namespace dphoi {

std::string_view to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::max: return "max";
    case FusionMode::avg: return "avg";
    case FusionMode::none: return "none";
  }
  return "max";
}

FusionMode fusion_mode_from_string(std::string_view name) {
  if (name == "max") return FusionMode::max;
  if (name == "avg") return FusionMode::avg;
  if (name == "none") return FusionMode::none;
  throw ConfigError("unknown fusion mode '" + std::string(name) + "' (expected max, avg or none)");
}

// ---- RPQ selection ----

std::vector<double> person_scores(const Matrix& object_logits, int person_class) {
  if (person_class < 0 || person_class >= object_logits.cols() - 1) {
    throw ConfigError("person class index outside the object label space");
  }
  std::vector<double> scores(static_cast<std::size_t>(object_logits.rows()));
  for (Index i = 0; i < object_logits.rows(); ++i) {
    const double mx = object_logits.row(i).maxCoeff();
    const double total = (object_logits.row(i).array() - mx).exp().sum();
    scores[static_cast<std::size_t>(i)] = std::exp(object_logits(i, person_class) - mx) / total;
  }
  return scores;
}

RPQSet select_rpq(const Predictions& detection, const ag::Var& decoder_output, int person_class,
                  double threshold, bool detach) {
  if (detection.kind != HeadKind::detection) throw StateError("select_rpq: needs detection predictions");
  if (decoder_output.rows() != detection.object_logits.rows()) {
    throw ShapeError("select_rpq: decoder output and predictions disagree on query count");
  }
  RPQSet set;
  const std::vector<double> scores = person_scores(detection.object_logits.value(), person_class);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] > threshold) {
      set.indices.push_back(static_cast<Index>(i));
      set.person_scores.push_back(scores[i]);
    }
  }
  if (!set.empty()) {
    const ag::Var source = detach ? ag::detach(decoder_output) : decoder_output;
    set.queries = ag::select_rows(source, set.indices);
  }
  return set;
}

// ---- fusion ----

FusedVerbPrediction fuse_verb_predictions(const Matrix& scores, FusionMode mode) {
  if (scores.rows() == 0) throw DataError("fuse_verb_predictions: empty prediction set");
  FusedVerbPrediction out;
  out.mode = mode;
  out.source_count = scores.rows();
  switch (mode) {
    case FusionMode::max: out.scores = scores.colwise().maxCoeff(); break;
    case FusionMode::avg: out.scores = scores.colwise().mean(); break;
    case FusionMode::none: out.scores = scores; break;
  }
  return out;
}

ag::Var fuse_verb_scores(const ag::Var& scores, FusionMode mode) {
  if (!scores.defined() || scores.rows() == 0) throw DataError("fuse_verb_scores: empty prediction set");
  switch (mode) {
    case FusionMode::max: return ag::col_max(scores);
    case FusionMode::avg: return ag::col_mean(scores);
    case FusionMode::none: return scores;
  }
  return scores;
}

ag::Var fused_verb_loss(const ag::Var& fused, FusionMode mode, const std::vector<double>& target,
                        const std::vector<bool>& mask, const FocalParams& focal) {
  const ag::Var loss = verb_focal(fused, target, mask, focal);
  if (mode == FusionMode::none) return ag::scale(loss, 1.0 / static_cast<double>(fused.rows()));
  return loss;
}

// ---- detection branch ----

namespace {

Predictions slice_predictions(const Predictions& p, Index offset, Index count) {
  Predictions out;
  out.kind = HeadKind::detection;
  out.boxes = ag::slice_rows(p.boxes, offset, count);
  out.object_logits = ag::slice_rows(p.object_logits, offset, count);
  for (const auto& aux : p.aux) out.aux.push_back(slice_predictions(aux, offset, count));
  return out;
}

Matrix softmax_values(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

struct Supervision {
  MatchResult match;
  BoxLosses box;
  ag::Var ce;
};

Supervision supervise(const Predictions& p, const DetectionTargets& targets, const BranchOptions& options) {
  Supervision s;
  if (!p.object_logits.value().allFinite() || !p.boxes.value().allFinite()) {
    throw NonFiniteError("detection outputs are not finite");
  }
  const MatchCostWeights cost_weights{options.weights.cls, options.weights.box, options.weights.giou};
  const Matrix cost = detection_match_cost(softmax_values(p.object_logits.value()), p.boxes.value(),
                                           targets.boxes, targets.labels, cost_weights);
  s.match = hungarian_match(cost);
  s.box = box_loss_sums(p.boxes, targets.boxes, s.match);
  s.ce = object_ce(p.object_logits, targets.labels, s.match, options.no_object_weight);
  return s;
}

}  // namespace

DetectionBranchResult run_detection_branch(const Model& model, const Image& image,
                                           const DetectionTargets& targets,
                                           const BranchOptions& options, std::mt19937_64* rng) {
  if (targets.boxes.cols() != 4 || static_cast<Index>(targets.labels.size()) != targets.boxes.rows()) {
    throw ShapeError("run_detection_branch: targets need one label per [cx cy w h] box");
  }
  const ModelConfig& cfg = model.config();
  DetectionBranchResult r;
  r.encoder = model.embed_and_encode(image);

  const Index n = cfg.num_queries;
  ag::Var queries = model.learnable_queries();
  ag::Var initial = model.initial_embeddings(n);
  BoolMatrix self_allowed;
  std::optional<DenoisedQueryGroup> dn;
  if (rng != nullptr && options.dn.enabled && cfg.dn_enabled && targets.boxes.rows() > 0) {
    dn = build_dn_queries(model, targets.boxes, targets.labels, options.dn.noise_scale,
                          options.dn.label_flip_prob, *rng);
    r.dn_count = targets.boxes.rows();
    const std::vector<ag::Var> q{dn->encoded_queries, queries};
    const std::vector<ag::Var> init{dn->content, initial};
    queries = ag::concat_rows(q);
    initial = ag::concat_rows(init);
    self_allowed = dn_attention_mask(r.dn_count, n);
  }

  r.state = model.detection_decode(r.encoder, queries, initial, self_allowed);
  const Predictions full = model.predict_heads(r.state, HeadKind::detection);
  r.predictions = r.dn_count > 0 ? slice_predictions(full, r.dn_count, n) : full;

  Supervision main = supervise(r.predictions, targets, options);
  r.match = main.match;
  r.l1_sum = main.box.l1;
  r.giou_sum = main.box.giou;
  r.ce = main.ce;
  for (const auto& aux : r.predictions.aux) {
    Supervision s = supervise(aux, targets, options);
    r.l1_sum = ag::add(r.l1_sum, s.box.l1);
    r.giou_sum = ag::add(r.giou_sum, s.box.giou);
    r.ce = ag::add(r.ce, s.ce);
  }
  r.num_boxes = targets.boxes.rows();

  if (r.dn_count > 0) {
    // Denoising queries reconstruct their own ground truth: fixed identity pairing.
    MatchResult identity;
    for (Index i = 0; i < r.dn_count; ++i) identity.pairs.emplace_back(i, i);
    const Predictions dn_pred = slice_predictions(full, 0, r.dn_count);
    BoxLosses box = box_loss_sums(dn_pred.boxes, targets.boxes, identity);
    r.dn_l1_sum = box.l1;
    r.dn_giou_sum = box.giou;
    r.dn_ce = object_ce(dn_pred.object_logits, targets.labels, identity, options.no_object_weight);
    r.dn_boxes = r.dn_count;
  }
  return r;
}

// ---- verb branch ----

PersonQueryPass run_person_queries(const Model& model, const Image& image, double threshold) {
  const ModelConfig& cfg = model.config();
  PersonQueryPass pass;
  pass.encoder = model.embed_and_encode(image);
  pass.detection_state = model.detection_decode(pass.encoder, model.learnable_queries(),
                                                model.initial_embeddings(cfg.num_queries));
  pass.detection = model.predict_heads(pass.detection_state, HeadKind::detection);
  pass.rpq = select_rpq(pass.detection, pass.detection_state.output, cfg.person_class_id, threshold,
                        cfg.detach_rpq);
  if (!pass.rpq.empty()) {
    pass.interaction_state =
        model.interaction_decode(pass.encoder, pass.rpq.queries, model.initial_embeddings(pass.rpq.size()));
  }
  return pass;
}

namespace {

double threshold_of(const Model& model, const BranchOptions& options) {
  return options.rpq_threshold.value_or(model.config().rpq_threshold);
}

void check_target(const Model& model, const VerbTarget& target) {
  const auto classes = static_cast<std::size_t>(model.config().num_verb_classes);
  if (target.multi_hot.size() != classes || target.mask.size() != classes) {
    throw ShapeError("verb target must cover every verb class");
  }
}

}  // namespace

VerbBranchResult run_verb_branch_image(const Model& model, const Image& image,
                                       const VerbTarget& target, const BranchOptions& options) {
  return run_verb_branch_video(model, std::span<const Image>(&image, 1), target, options);
}

VerbBranchResult run_verb_branch_video(const Model& model, std::span<const Image> frames,
                                       const VerbTarget& target, const BranchOptions& options) {
  check_target(model, target);
  if (frames.empty()) throw DataError("verb branch: no frames");
  const double threshold = threshold_of(model, options);
  VerbBranchResult result;
  std::vector<ag::Var> rows;
  for (const Image& frame : frames) {
    PersonQueryPass pass = run_person_queries(model, frame, threshold);
    if (pass.interaction_state) {
      const Predictions verbs = model.predict_heads(*pass.interaction_state, HeadKind::verb);
      rows.push_back(ag::sigmoid(verbs.verb_logits));
    }
    result.rpq.push_back(std::move(pass.rpq));
  }
  if (rows.empty()) {
    result.skipped = true;
    return result;
  }
  result.verb_scores = rows.size() == 1 ? rows.front() : ag::concat_rows(rows);
  result.fused = fuse_verb_scores(result.verb_scores, options.fusion);
  result.loss = fused_verb_loss(result.fused, options.fusion, target.multi_hot, target.mask, options.focal);
  return result;
}

// ---- caption branch ----

Index select_best_rpq(const Matrix& normalized_rpq, const Matrix& text) {
  if (normalized_rpq.rows() == 0) throw EmptyRpqError("select_best_rpq: no candidates");
  if (text.rows() != 1 || text.cols() != normalized_rpq.cols()) {
    throw ShapeError("select_best_rpq: text embedding must be [1 x proj_dim]");
  }
  Index best = 0;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (Index i = 0; i < normalized_rpq.rows(); ++i) {
    const double sim = normalized_rpq.row(i).dot(text.row(0));
    if (sim > best_sim) {
      best_sim = sim;
      best = i;
    }
  }
  return best;
}

AlignmentTerms caption_alignment_loss(const ag::Var& image_embedding, const CaptionTarget& target,
                                      std::span<const ag::Var> t2i_negatives, double temperature) {
  const Index dim = image_embedding.cols();
  if (image_embedding.rows() != 1 || target.positive.rows() != 1 || target.positive.cols() != dim ||
      (target.negatives.rows() > 0 && target.negatives.cols() != dim)) {
    throw ShapeError("caption_alignment_loss: embedding widths disagree");
  }
  const ag::Var positive_t = ag::constant(target.positive.transpose());
  const ag::Var sim_pos = ag::matmul(image_embedding, positive_t);
  const Matrix negatives = target.negatives.rows() > 0 ? target.negatives : Matrix(0, dim);
  const ag::Var negs_i2t = ag::matmul(image_embedding, ag::constant(negatives.transpose()));

  ag::Var negs_t2i = negs_i2t;
  if (!t2i_negatives.empty()) {
    const ag::Var others = ag::concat_rows(t2i_negatives);
    negs_t2i = ag::matmul(ag::constant(target.positive), ag::transpose(others));
  }
  AlignmentTerms terms;
  terms.i2t = info_nce(sim_pos, negs_i2t, temperature);
  terms.t2i = info_nce(sim_pos, negs_t2i, temperature);
  terms.total = ag::scale(ag::add(terms.i2t, terms.t2i), 0.5);
  return terms;
}

CaptionBranchResult select_caption_queries(const Model& model, const Image& image,
                                           std::span<const CaptionTarget> targets,
                                           const BranchOptions& options) {
  if (targets.empty()) throw DataError("caption branch: sample has no parsed triplets");
  CaptionBranchResult result;
  PersonQueryPass pass = run_person_queries(model, image, threshold_of(model, options));
  result.rpq = std::move(pass.rpq);
  if (!pass.interaction_state) {
    result.skipped = true;
    return result;
  }
  result.projected = model.project_for_alignment(pass.interaction_state->output);
  for (const auto& t : targets) {
    const Index best = select_best_rpq(result.projected.value(), t.positive);
    result.selected.push_back(best);
    result.selected_embeddings.push_back(ag::slice_rows(result.projected, best, 1));
  }
  return result;
}

void attach_caption_loss(CaptionBranchResult& result, std::span<const CaptionTarget> targets,
                         std::span<const ag::Var> t2i_negatives, double temperature) {
  if (result.skipped) return;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    AlignmentTerms terms =
        caption_alignment_loss(result.selected_embeddings[k], targets[k], t2i_negatives, temperature);
    if (result.loss.defined()) {
      result.loss = ag::add(result.loss, terms.total);
      result.i2t = ag::add(result.i2t, terms.i2t);
      result.t2i = ag::add(result.t2i, terms.t2i);
    } else {
      result.loss = terms.total;
      result.i2t = terms.i2t;
      result.t2i = terms.t2i;
    }
  }
}

CaptionBranchResult run_caption_branch(const Model& model, const Image& image,
                                       std::span<const CaptionTarget> targets,
                                       const BranchOptions& options,
                                       std::span<const ag::Var> t2i_negatives) {
  CaptionBranchResult result = select_caption_queries(model, image, targets, options);
  attach_caption_loss(result, targets, t2i_negatives, model.config().temperature);
  return result;
}

}  // namespace dphoi
