#pragma once

#include "dphoi/autograd.hpp"

#include <utility>
#include <vector>

namespace dphoi {

// Normalized (cx, cy, w, h) box helpers on plain values.
struct BoxXYXY {
  double x0, y0, x1, y1;
};
BoxXYXY to_xyxy(double cx, double cy, double w, double h);
double box_iou(const BoxXYXY& a, const BoxXYXY& b);
// IoU minus the fraction of the enclosing box not covered by the union.
double generalized_iou(const BoxXYXY& a, const BoxXYXY& b);

struct MatchResult {
  std::vector<std::pair<Index, Index>> pairs;  // (query, target), sorted by query
  std::vector<Index> unmatched_queries;
  double total_cost = 0.0;  // summed in query order
};

// Minimal-cost injective assignment between the rows (queries) and columns
// (targets) of `cost`; |pairs| = min(rows, cols). Rejects non-finite entries
// with DataError. O(n^2 m) shortest augmenting path with potentials.
MatchResult hungarian_match(const Matrix& cost);

struct MatchCostWeights {
  double class_weight = 1.0;
  double l1_weight = 5.0;
  double giou_weight = 2.0;
};

// Pairwise set-prediction cost: -p(class) * w_c + L1 * w_b - GIoU * w_g.
// probs: [N x (K+1)] softmax scores; pred_boxes: [N x 4]; target_boxes [M x 4].
Matrix detection_match_cost(const Matrix& probs, const Matrix& pred_boxes,
                            const Matrix& target_boxes, const std::vector<int>& target_labels,
                            const MatchCostWeights& weights);

}  // namespace dphoi
