#include "dphoi/matching.hpp"

#include "dphoi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dphoi {

BoxXYXY to_xyxy(double cx, double cy, double w, double h) {
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

namespace {
double area(const BoxXYXY& b) { return (b.x1 - b.x0) * (b.y1 - b.y0); }

double intersection(const BoxXYXY& a, const BoxXYXY& b) {
  const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  return iw * ih;
}
}  // namespace

double box_iou(const BoxXYXY& a, const BoxXYXY& b) {
  const double inter = intersection(a, b);
  const double uni = area(a) + area(b) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double generalized_iou(const BoxXYXY& a, const BoxXYXY& b) {
  const double inter = intersection(a, b);
  const double uni = area(a) + area(b) - inter;
  const double cw = std::max(a.x1, b.x1) - std::min(a.x0, b.x0);
  const double ch = std::max(a.y1, b.y1) - std::min(a.y0, b.y0);
  const double enclosing = cw * ch;
  if (uni <= 0 || enclosing <= 0) return 0.0;
  return inter / uni - (enclosing - uni) / enclosing;
}

MatchResult hungarian_match(const Matrix& cost) {
  for (Index i = 0; i < cost.size(); ++i) {
    if (!std::isfinite(cost.data()[i])) throw DataError("hungarian_match: non-finite cost entry");
  }
  MatchResult result;
  const Index n_queries = cost.rows();
  const Index n_targets = cost.cols();
  if (n_queries == 0 || n_targets == 0) {
    for (Index q = 0; q < n_queries; ++q) result.unmatched_queries.push_back(q);
    return result;
  }

  // The solver assigns every row of `a`; orient so rows <= cols.
  const bool transposed = n_queries > n_targets;
  const Matrix a = transposed ? Matrix(cost.transpose()) : cost;
  const Index n = a.rows();
  const Index m = a.cols();
  constexpr double kInf = std::numeric_limits<double>::infinity();

  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<Index> owner(m + 1, 0), way(m + 1, 0);
  for (Index i = 1; i <= n; ++i) {
    owner[0] = i;
    Index j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const Index i0 = owner[j0];
      double delta = kInf;
      Index j1 = 0;
      for (Index j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const Index j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<Index> target_of(static_cast<std::size_t>(n_queries), -1);
  for (Index j = 1; j <= m; ++j) {
    if (owner[j] == 0) continue;
    const Index row = owner[j] - 1;
    const Index col = j - 1;
    if (transposed) {
      target_of[static_cast<std::size_t>(col)] = row;
    } else {
      target_of[static_cast<std::size_t>(row)] = col;
    }
  }
  for (Index q = 0; q < n_queries; ++q) {
    const Index t = target_of[static_cast<std::size_t>(q)];
    if (t < 0) {
      result.unmatched_queries.push_back(q);
    } else {
      result.pairs.emplace_back(q, t);
      result.total_cost += cost(q, t);
    }
  }
  return result;
}

Matrix detection_match_cost(const Matrix& probs, const Matrix& pred_boxes,
                            const Matrix& target_boxes, const std::vector<int>& target_labels,
                            const MatchCostWeights& weights) {
  const Index n = pred_boxes.rows();
  const Index m = target_boxes.rows();
  if (probs.rows() != n || static_cast<Index>(target_labels.size()) != m) {
    throw ShapeError("detection_match_cost: inconsistent prediction/target counts");
  }
  Matrix cost(n, m);
  for (Index i = 0; i < n; ++i) {
    const BoxXYXY p = to_xyxy(pred_boxes(i, 0), pred_boxes(i, 1), pred_boxes(i, 2), pred_boxes(i, 3));
    for (Index j = 0; j < m; ++j) {
      const int label = target_labels[static_cast<std::size_t>(j)];
      if (label < 0 || label >= probs.cols() - 1) throw DataError("target class outside label space");
      const BoxXYXY t = to_xyxy(target_boxes(j, 0), target_boxes(j, 1), target_boxes(j, 2), target_boxes(j, 3));
      const double l1 = (pred_boxes.row(i) - target_boxes.row(j)).cwiseAbs().sum();
      cost(i, j) = -weights.class_weight * probs(i, label) + weights.l1_weight * l1 -
                   weights.giou_weight * generalized_iou(p, t);
    }
  }
  return cost;
}

}  // namespace dphoi
