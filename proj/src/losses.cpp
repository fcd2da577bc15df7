#include "dphoi/losses.hpp"

#include "dphoi/errors.hpp"

#include <cmath>
#include <string>

namespace dphoi {

namespace {

ag::Var zero() { return ag::Var::scalar(0.0); }

ag::Var col(const ag::Var& m, Index c) { return ag::slice_cols(m, c, 1); }

}  // namespace

BoxLosses box_loss_sums(const ag::Var& pred_boxes, const Matrix& target_boxes,
                        const MatchResult& match) {
  if (pred_boxes.cols() != 4 || target_boxes.cols() != 4) {
    throw ShapeError("box losses: boxes must be [n x 4]");
  }
  if (match.pairs.empty()) return {zero(), zero()};

  std::vector<Index> rows;
  Matrix target(static_cast<Index>(match.pairs.size()), 4);
  for (std::size_t k = 0; k < match.pairs.size(); ++k) {
    rows.push_back(match.pairs[k].first);
    target.row(static_cast<Index>(k)) = target_boxes.row(match.pairs[k].second);
  }
  const ag::Var pred = ag::select_rows(pred_boxes, rows);
  const ag::Var tgt = ag::constant(target);

  BoxLosses out;
  out.l1 = ag::sum(ag::abs(ag::sub(pred, tgt)));

  const ag::Var cx = col(pred, 0), cy = col(pred, 1), w = col(pred, 2), h = col(pred, 3);
  const ag::Var px0 = ag::sub(cx, ag::scale(w, 0.5));
  const ag::Var px1 = ag::add(cx, ag::scale(w, 0.5));
  const ag::Var py0 = ag::sub(cy, ag::scale(h, 0.5));
  const ag::Var py1 = ag::add(cy, ag::scale(h, 0.5));
  const Matrix tc = target;
  const ag::Var tx0 = ag::constant((tc.col(0) - 0.5 * tc.col(2)).eval());
  const ag::Var tx1 = ag::constant((tc.col(0) + 0.5 * tc.col(2)).eval());
  const ag::Var ty0 = ag::constant((tc.col(1) - 0.5 * tc.col(3)).eval());
  const ag::Var ty1 = ag::constant((tc.col(1) + 0.5 * tc.col(3)).eval());
  const ag::Var t_area = ag::constant(tc.col(2).cwiseProduct(tc.col(3)).eval());

  const ag::Var p_area = ag::mul(w, h);
  const ag::Var iw = ag::relu(ag::sub(ag::minimum(px1, tx1), ag::maximum(px0, tx0)));
  const ag::Var ih = ag::relu(ag::sub(ag::minimum(py1, ty1), ag::maximum(py0, ty0)));
  const ag::Var inter = ag::mul(iw, ih);
  const ag::Var uni = ag::sub(ag::add(p_area, t_area), inter);
  const ag::Var iou = ag::div(inter, uni);
  const ag::Var cw = ag::sub(ag::maximum(px1, tx1), ag::minimum(px0, tx0));
  const ag::Var ch = ag::sub(ag::maximum(py1, ty1), ag::minimum(py0, ty0));
  const ag::Var enclosing = ag::mul(cw, ch);
  const ag::Var giou = ag::sub(iou, ag::div(ag::sub(enclosing, uni), enclosing));
  out.giou = ag::sum(ag::add_scalar(ag::neg(giou), 1.0));
  return out;
}

BoxLosses box_losses(const ag::Var& pred_boxes, const Matrix& target_boxes, const MatchResult& match) {
  BoxLosses sums = box_loss_sums(pred_boxes, target_boxes, match);
  if (match.pairs.empty()) return sums;
  const double inv = 1.0 / static_cast<double>(match.pairs.size());
  return {ag::scale(sums.l1, inv), ag::scale(sums.giou, inv)};
}

ag::Var object_ce(const ag::Var& logits, const std::vector<int>& target_labels,
                  const MatchResult& match, double no_object_weight) {
  const Index n = logits.rows();
  const Index no_object = logits.cols() - 1;
  if (n == 0) return zero();
  std::vector<Index> classes(static_cast<std::size_t>(n), no_object);
  Matrix weight = Matrix::Constant(n, 1, no_object_weight);
  for (const auto& [q, t] : match.pairs) {
    if (t < 0 || t >= static_cast<Index>(target_labels.size())) throw DataError("object_ce: target index out of range");
    const int label = target_labels[static_cast<std::size_t>(t)];
    if (label < 0 || label >= no_object) {
      throw DataError("object_ce: target class " + std::to_string(label) + " outside label space");
    }
    classes[static_cast<std::size_t>(q)] = label;
    weight(q, 0) = 1.0;
  }
  const ag::Var nll = ag::neg(ag::pick_per_row(ag::log_softmax_rows(logits), classes));
  const double total_weight = weight.sum();
  return ag::scale(ag::sum(ag::mul(nll, ag::constant(weight))), 1.0 / total_weight);
}

ag::Var verb_focal(const ag::Var& scores, const std::vector<double>& target,
                   const std::vector<bool>& mask, const FocalParams& params) {
  const Index classes = scores.cols();
  if (static_cast<Index>(target.size()) != classes || static_cast<Index>(mask.size()) != classes) {
    throw ShapeError("verb_focal: target and mask must have one entry per verb class");
  }
  std::vector<Index> active;
  for (Index c = 0; c < classes; ++c) {
    const auto k = static_cast<std::size_t>(c);
    if (mask[k]) {
      active.push_back(c);
    } else if (target[k] > 0.0) {
      throw DataError("verb_focal: positive target on class " + std::to_string(c) +
                      " outside the sample's dataset");
    }
  }
  if (active.empty() || scores.rows() == 0) return zero();

  const Index rows = scores.rows();
  const Index m = static_cast<Index>(active.size());
  Matrix pos(rows, m);
  for (Index j = 0; j < m; ++j) pos.col(j).setConstant(target[static_cast<std::size_t>(active[static_cast<std::size_t>(j)])]);
  const Matrix negw = Matrix::Ones(rows, m) - pos;

  constexpr double kEps = 1e-6;
  const ag::Var p = ag::clamp(ag::select_cols(scores, active), kEps, 1.0 - kEps);
  const ag::Var one_minus_p = ag::add_scalar(ag::neg(p), 1.0);
  const ag::Var pos_term = ag::mul(ag::pow(one_minus_p, params.gamma), ag::neg(ag::log(p)));
  const ag::Var neg_term = ag::mul(ag::pow(p, params.gamma), ag::neg(ag::log(one_minus_p)));
  const ag::Var loss = ag::add(ag::scale(ag::mul(pos_term, ag::constant(pos)), params.alpha),
                               ag::scale(ag::mul(neg_term, ag::constant(negw)), 1.0 - params.alpha));
  return ag::sum(loss);
}

ag::Var info_nce(const ag::Var& sim_pos, const ag::Var& sim_negs, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("info_nce: temperature must be positive");
  if (sim_pos.rows() != 1 || sim_pos.cols() != 1) throw ShapeError("info_nce: sim_pos must be 1x1");
  if (!sim_negs.defined() || sim_negs.cols() == 0) return zero();
  if (sim_negs.rows() != 1) throw ShapeError("info_nce: sim_negs must be a row");
  const std::vector<ag::Var> parts{sim_pos, sim_negs};
  const ag::Var logits = ag::scale(ag::concat_cols(parts), 1.0 / temperature);
  const std::vector<Index> first{0};
  return ag::neg(ag::pick_per_row(ag::log_softmax_rows(logits), first));
}

ag::Var info_nce_bidirectional(const ag::Var& sim_pos, const ag::Var& negs_i2t,
                               const ag::Var& negs_t2i, double temperature) {
  const ag::Var i2t = info_nce(sim_pos, negs_i2t, temperature);
  const ag::Var t2i = info_nce(sim_pos, negs_t2i, temperature);
  return ag::scale(ag::add(i2t, t2i), 0.5);
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"box", w.box},         {"giou", w.giou},       {"cls", w.cls},
                     {"action", w.action},   {"caption", w.caption}, {"verb_branch", w.verb_branch}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  const LossWeights d;
  w.box = j.value("box", d.box);
  w.giou = j.value("giou", d.giou);
  w.cls = j.value("cls", d.cls);
  w.action = j.value("action", d.action);
  w.caption = j.value("caption", d.caption);
  w.verb_branch = j.value("verb_branch", d.verb_branch);
}

LossReport compose_total(const LossValues& terms, const LossWeights& weights) {
  const double all[] = {terms.box, terms.giou, terms.cls, terms.action, terms.caption};
  for (double v : all) {
    if (!std::isfinite(v)) {
      throw NonFiniteError("non-finite loss term (L_b=" + std::to_string(terms.box) +
                           ", L_g=" + std::to_string(terms.giou) + ", L_c=" + std::to_string(terms.cls) +
                           ", L_a=" + std::to_string(terms.action) +
                           ", L_s=" + std::to_string(terms.caption) + ")");
    }
  }
  LossReport r;
  r.terms = terms;
  r.weights = weights;
  r.detection = weights.box * terms.box + weights.giou * terms.giou + weights.cls * terms.cls;
  r.verb = weights.action * terms.action + weights.caption * terms.caption;
  r.total = r.detection + weights.verb_branch * r.verb;
  return r;
}

namespace {
ag::Var or_zero(const ag::Var& v) { return v.defined() ? v : zero(); }
double value_or_zero(const ag::Var& v) { return v.defined() ? v.item() : 0.0; }
}  // namespace

ag::Var weighted_total(const LossVars& t, const LossWeights& w) {
  const ag::Var detection = ag::add(ag::add(ag::scale(or_zero(t.box), w.box), ag::scale(or_zero(t.giou), w.giou)),
                                    ag::scale(or_zero(t.cls), w.cls));
  const ag::Var verb = ag::add(ag::scale(or_zero(t.action), w.action), ag::scale(or_zero(t.caption), w.caption));
  return ag::add(detection, ag::scale(verb, w.verb_branch));
}

LossValues values_of(const LossVars& t) {
  return {value_or_zero(t.box), value_or_zero(t.giou), value_or_zero(t.cls), value_or_zero(t.action),
          value_or_zero(t.caption)};
}

}  // namespace dphoi
