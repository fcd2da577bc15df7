#pragma once

// The two supervision branches run after the shared encoder:
//
//  * detection: detection decoder -> box/class heads -> bipartite matching
//  * verb: detection decoder -> reliable person query (RPQ) selection ->
//    interaction decoder -> verb head -> verb-wise fusion -> focal loss, or,
//    for captions, projection -> best-matching RPQ -> bidirectional InfoNCE.

#include "dphoi/denoising.hpp"
#include "dphoi/losses.hpp"
#include "dphoi/matching.hpp"
#include "dphoi/model.hpp"

#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dphoi {

enum class FusionMode { max, avg, none };
std::string_view to_string(FusionMode mode);
FusionMode fusion_mode_from_string(std::string_view name);

struct BranchOptions {
  LossWeights weights;            // also the matching-cost coefficients
  double no_object_weight = 0.1;
  FocalParams focal;
  FusionMode fusion = FusionMode::max;
  std::optional<double> rpq_threshold;  // defaults to the model's
  DnOptions dn;
};

// ---- RPQ selection ----

struct RPQSet {
  std::vector<Index> indices;        // strictly increasing
  ag::Var queries;                   // [N_p x embed_dim], undefined when empty
  std::vector<double> person_scores;  // each > threshold

  [[nodiscard]] bool empty() const { return indices.empty(); }
  [[nodiscard]] Index size() const { return static_cast<Index>(indices.size()); }
};

// Softmax over all object classes (no-object included), read at the person
// column.
std::vector<double> person_scores(const Matrix& object_logits, int person_class);

// Queries whose person score is strictly above `threshold`, in query order.
// Selects rows of `decoder_output` (detached when `detach`). An empty result
// is a legal value.
RPQSet select_rpq(const Predictions& detection, const ag::Var& decoder_output, int person_class,
                  double threshold, bool detach = false);

// ---- verb-wise prediction fusion ----

struct FusedVerbPrediction {
  FusionMode mode = FusionMode::max;
  Matrix scores;  // [1 x C_a] for max/avg, untouched [N_p x C_a] for none
  Index source_count = 0;
};

// Column-wise max or mean over per-query verb scores. Rejects empty input.
FusedVerbPrediction fuse_verb_predictions(const Matrix& scores, FusionMode mode);
ag::Var fuse_verb_scores(const ag::Var& scores, FusionMode mode);

// Focal loss for fused scores; for FusionMode::none every row is supervised
// with the image label and the row losses are averaged.
ag::Var fused_verb_loss(const ag::Var& fused, FusionMode mode, const std::vector<double>& target,
                        const std::vector<bool>& mask, const FocalParams& focal);

// ---- detection branch ----

struct DetectionTargets {
  Matrix boxes = Matrix(0, 4);  // [M x 4] cxcywh
  std::vector<int> labels;
};

struct DetectionBranchResult {
  EncoderOutput encoder;
  DecoderState state;       // includes the DN rows first when dn_count > 0
  Index dn_count = 0;
  Predictions predictions;  // learnable queries only
  MatchResult match;
  ag::Var l1_sum;   // summed over matched pairs (and aux layers)
  ag::Var giou_sum;
  ag::Var ce;       // weighted mean over queries (summed over aux layers)
  Index num_boxes = 0;
  // Denoising reconstruction terms; undefined when DN is off.
  ag::Var dn_l1_sum;
  ag::Var dn_giou_sum;
  ag::Var dn_ce;
  Index dn_boxes = 0;
};

// `rng` drives DN noise; pass nullptr to disable DN for this call.
DetectionBranchResult run_detection_branch(const Model& model, const Image& image,
                                           const DetectionTargets& targets,
                                           const BranchOptions& options,
                                           std::mt19937_64* rng = nullptr);

// ---- verb branch ----

struct VerbTarget {
  std::vector<double> multi_hot;  // [C_a], zero outside `mask`
  std::vector<bool> mask;         // classes owned by the sample's dataset
};

struct PersonQueryPass {
  EncoderOutput encoder;
  DecoderState detection_state;
  Predictions detection;
  RPQSet rpq;
  std::optional<DecoderState> interaction_state;  // absent when rpq is empty
};

// encoder -> detection decoder -> RPQ selection -> interaction decoder.
PersonQueryPass run_person_queries(const Model& model, const Image& image, double threshold);

struct VerbBranchResult {
  bool skipped = false;    // no RPQ cleared the threshold
  std::vector<RPQSet> rpq;  // one per frame
  ag::Var verb_scores;      // sigmoid scores, rows concatenated over frames
  ag::Var fused;            // fused scores (== verb_scores for FusionMode::none)
  ag::Var loss;             // focal loss for this sample, undefined when skipped
};

VerbBranchResult run_verb_branch_image(const Model& model, const Image& image,
                                       const VerbTarget& target, const BranchOptions& options);

// Frames are already sampled (see sample_frame_indices); all rows from all
// frames are fused together and supervised once with the video label.
VerbBranchResult run_verb_branch_video(const Model& model, std::span<const Image> frames,
                                       const VerbTarget& target, const BranchOptions& options);

// ---- caption branch ----

struct CaptionTarget {
  std::string prompt;
  Matrix positive;   // [1 x proj_dim], L2-normalized
  Matrix negatives;  // [n_neg x proj_dim], L2-normalized
};

struct CaptionBranchResult {
  bool skipped = false;
  RPQSet rpq;
  ag::Var projected;              // [N_p x proj_dim] normalized RPQ embeddings
  std::vector<Index> selected;    // per target: row of `projected` with max cosine
  std::vector<ag::Var> selected_embeddings;  // per target, [1 x proj_dim]
  ag::Var loss;                   // sum over targets of L_s, undefined when skipped
  ag::Var i2t;                    // summed per direction, for reporting
  ag::Var t2i;
};

// Index of the row with the highest cosine similarity to `text`.
Index select_best_rpq(const Matrix& normalized_rpq, const Matrix& text);

// L_s for one triplet. When `t2i_negatives` is empty the text-to-image
// direction reuses the text negatives' similarity set, so both directions
// coincide.
struct AlignmentTerms {
  ag::Var i2t, t2i, total;
};
AlignmentTerms caption_alignment_loss(const ag::Var& image_embedding, const CaptionTarget& target,
                                      std::span<const ag::Var> t2i_negatives, double temperature);

// Forward pass and per-target RPQ selection without the loss.
CaptionBranchResult select_caption_queries(const Model& model, const Image& image,
                                           std::span<const CaptionTarget> targets,
                                           const BranchOptions& options);

// Adds the loss to a selection; `t2i_negatives` are image-side embeddings
// from other caption samples in the batch.
void attach_caption_loss(CaptionBranchResult& result, std::span<const CaptionTarget> targets,
                         std::span<const ag::Var> t2i_negatives, double temperature);

CaptionBranchResult run_caption_branch(const Model& model, const Image& image,
                                       std::span<const CaptionTarget> targets,
                                       const BranchOptions& options,
                                       std::span<const ag::Var> t2i_negatives = {});

}  // namespace dphoi
