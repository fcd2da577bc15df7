#pragma once

// Loss terms of the pre-training objective and their weighted composition.
//
//   total = w_b * L_b + w_g * L_g + w_c * L_c + w_v * (w_a * L_a + w_s * L_s)

#include "dphoi/autograd.hpp"
#include "dphoi/matching.hpp"

#include "json.hpp"

#include <vector>

namespace dphoi {

struct BoxLosses {
  ag::Var l1;    // L1 distance summed over the 4 coordinates
  ag::Var giou;  // 1 - GIoU
};

// Per-pair losses summed over matched pairs (not yet normalized). Both are
// zero when there are no pairs.
BoxLosses box_loss_sums(const ag::Var& pred_boxes, const Matrix& target_boxes,
                        const MatchResult& match);
// Mean over matched pairs.
BoxLosses box_losses(const ag::Var& pred_boxes, const Matrix& target_boxes, const MatchResult& match);

// Weighted cross-entropy over all queries. Matched queries target their
// object class, the rest target the trailing no-object class with weight
// `no_object_weight`; the result is the weighted mean.
ag::Var object_ce(const ag::Var& logits, const std::vector<int>& target_labels,
                  const MatchResult& match, double no_object_weight);

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

// Binary focal loss summed over the classes with mask[c] set (and over rows
// when scores has several). scores are probabilities, clamped to
// [1e-6, 1 - 1e-6]. Unmasked classes contribute neither loss nor gradient.
// A positive target on an unmasked class is a DataError.
ag::Var verb_focal(const ag::Var& scores, const std::vector<double>& target,
                   const std::vector<bool>& mask, const FocalParams& params = {});

// Softmax cross-entropy of the positive (index 0) against the negatives
// under temperature-scaled similarities. sim_pos is 1x1, sim_negs 1xn.
ag::Var info_nce(const ag::Var& sim_pos, const ag::Var& sim_negs, double temperature);
// 0.5 * (L_i2t + L_t2i).
ag::Var info_nce_bidirectional(const ag::Var& sim_pos, const ag::Var& negs_i2t,
                               const ag::Var& negs_t2i, double temperature);
inline ag::Var info_nce_bidirectional(const ag::Var& sim_pos, const ag::Var& sim_negs,
                                      double temperature) {
  return info_nce_bidirectional(sim_pos, sim_negs, sim_negs, temperature);
}

struct LossWeights {
  double box = 5.0;       // lambda_b
  double giou = 2.0;      // lambda_g
  double cls = 1.0;       // lambda_c
  double action = 1.0;    // lambda_a
  double caption = 1.0;   // lambda_s
  double verb_branch = 1.0;  // lambda_v

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};
void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct LossValues {
  double box = 0.0;
  double giou = 0.0;
  double cls = 0.0;
  double action = 0.0;
  double caption = 0.0;
};

struct LossReport {
  LossValues terms;
  LossWeights weights;
  double detection = 0.0;  // L_d
  double verb = 0.0;       // L_v
  double total = 0.0;
};

// Throws NonFiniteError when any term is NaN/Inf.
LossReport compose_total(const LossValues& terms, const LossWeights& weights);

struct LossVars {
  ag::Var box, giou, cls, action, caption;  // undefined == 0
};
// Differentiable counterpart of compose_total.
ag::Var weighted_total(const LossVars& terms, const LossWeights& weights);
LossValues values_of(const LossVars& terms);

}  // namespace dphoi
