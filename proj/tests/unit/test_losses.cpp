#include "doctest.h"
#include "test_util.hpp"

#include "dphoi/errors.hpp"
#include "dphoi/losses.hpp"

#include <cmath>
#include <limits>

using namespace dphoi;
using testutil::fd_check;
using testutil::random_matrix;

namespace {

MatchResult pairs(std::vector<std::pair<Index, Index>> p) {
  MatchResult m;
  m.pairs = std::move(p);
  return m;
}

Matrix valid_boxes(Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> c(0.3, 0.7), s(0.1, 0.4);
  Matrix b(n, 4);
  for (Index i = 0; i < n; ++i) b.row(i) << c(rng), c(rng), s(rng), s(rng);
  return b;
}

// Scalar focal term for one class, written out directly.
double focal_term(double p, double y, double alpha, double gamma) {
  return y > 0.5 ? -alpha * std::pow(1 - p, gamma) * std::log(p) : -(1 - alpha) * std::pow(p, gamma) * std::log(1 - p);
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("L1 and GIoU box terms match finite differences") {
  std::mt19937_64 rng(21);
  ag::Var pred(valid_boxes(3, rng), true);
  const Matrix tgt = valid_boxes(2, rng);
  const MatchResult m = pairs({{0, 1}, {2, 0}});
  CHECK(fd_check(pred, [&] { return box_loss_sums(pred, tgt, m).l1; }) < 1e-4);
  CHECK(fd_check(pred, [&] { return box_loss_sums(pred, tgt, m).giou; }) < 1e-4);
}

TEST_CASE("box terms agree with the plain-value GIoU") {
  std::mt19937_64 rng(22);
  const Matrix p = valid_boxes(2, rng);
  const Matrix t = valid_boxes(2, rng);
  const BoxLosses l = box_losses(ag::constant(p), t, pairs({{0, 0}, {1, 1}}));
  double giou = 0.0, l1 = 0.0;
  for (Index i = 0; i < 2; ++i) {
    giou += 1.0 - generalized_iou(to_xyxy(p(i, 0), p(i, 1), p(i, 2), p(i, 3)), to_xyxy(t(i, 0), t(i, 1), t(i, 2), t(i, 3)));
    l1 += (p.row(i) - t.row(i)).cwiseAbs().sum();
  }
  CHECK(l.giou.item() == doctest::Approx(giou / 2).epsilon(1e-12));
  CHECK(l.l1.item() == doctest::Approx(l1 / 2).epsilon(1e-12));
  CHECK(box_losses(ag::constant(p), t, MatchResult{}).l1.item() == 0.0);
}

TEST_CASE("object cross-entropy is the weighted mean of per-query NLL") {
  std::mt19937_64 rng(23);
  ag::Var logits(random_matrix(4, 4, rng, -2, 2), true);
  const std::vector<int> labels{2, 0};
  const MatchResult m = pairs({{1, 0}, {3, 1}});
  const double w_none = 0.1;
  // oracle
  const Matrix v = logits.value();
  const std::vector<Index> cls{3, 2, 3, 0};
  const std::vector<double> w{w_none, 1.0, w_none, 1.0};
  double num = 0.0, den = 0.0;
  for (Index i = 0; i < 4; ++i) {
    const double lse = std::log(v.row(i).array().exp().sum());
    num += w[static_cast<std::size_t>(i)] * (lse - v(i, cls[static_cast<std::size_t>(i)]));
    den += w[static_cast<std::size_t>(i)];
  }
  CHECK(object_ce(logits, labels, m, w_none).item() == doctest::Approx(num / den).epsilon(1e-12));
  CHECK(fd_check(logits, [&] { return object_ce(logits, labels, m, w_none); }) < 1e-6);
  CHECK_THROWS_AS(object_ce(logits, {7, 0}, m, w_none), DataError);
}

TEST_CASE("focal loss closed form and gradient") {
  const ag::Var half(Matrix::Constant(1, 1, 0.5));
  const double l = verb_focal(half, {1.0}, {true}).item();
  CHECK(l == doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-12));
  CHECK(l == doctest::Approx(0.0433).epsilon(1e-3));

  std::mt19937_64 rng(24);
  ag::Var p(random_matrix(2, 5, rng, 0.05, 0.95), true);
  const std::vector<double> y{1, 0, 0, 1, 0};
  const std::vector<bool> mask{true, true, true, true, false};
  double oracle = 0.0;
  for (Index r = 0; r < 2; ++r) {
    for (Index c = 0; c < 4; ++c) oracle += focal_term(p.value()(r, c), y[static_cast<std::size_t>(c)], 0.25, 2.0);
  }
  CHECK(verb_focal(p, y, mask).item() == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(fd_check(p, [&] { return verb_focal(p, y, mask); }) < 1e-5);
  ag::backward(verb_focal(p, y, mask));
  CHECK(p.grad().col(4).isZero(0.0));
}

TEST_CASE("focal loss rejects a positive label on an inactive class") {
  const ag::Var p(Matrix::Constant(1, 2, 0.5));
  CHECK_THROWS_AS(verb_focal(p, {0.0, 1.0}, {true, false}), DataError);
}

TEST_CASE("InfoNCE closed forms") {
  for (int n : {1, 5, 10, 100}) {
    const ag::Var pos(Matrix::Constant(1, 1, 0.3));
    const ag::Var negs(Matrix::Constant(1, n, 0.3));
    CHECK(std::abs(info_nce(pos, negs, 0.07).item() - std::log(n + 1.0)) < 1e-9);
    CHECK(std::abs(info_nce_bidirectional(pos, negs, 0.07).item() - std::log(n + 1.0)) < 1e-9);
    const ag::Var perfect(Matrix::Constant(1, 1, 1.0));
    const ag::Var far(Matrix::Constant(1, n, -1.0));
    CHECK(info_nce_bidirectional(perfect, far, 0.07).item() < 1e-9);
  }
}

TEST_CASE("InfoNCE gradient and direction averaging") {
  std::mt19937_64 rng(25);
  ag::Var pos(random_matrix(1, 1, rng), true);
  ag::Var a(random_matrix(1, 6, rng), true);
  ag::Var b(random_matrix(1, 4, rng), true);
  auto loss = [&] { return info_nce_bidirectional(pos, a, b, 0.5); };
  CHECK(fd_check(pos, loss) < 1e-6);
  CHECK(fd_check(a, loss) < 1e-6);
  CHECK(fd_check(b, loss) < 1e-6);
  const double both = loss().item();
  CHECK(both == doctest::Approx(0.5 * (info_nce(pos, a, 0.5).item() + info_nce(pos, b, 0.5).item())).epsilon(1e-12));
}

TEST_CASE("weighted total") {
  LossValues v{1.0, 2.0, 3.0, 4.0, 5.0};
  LossWeights w;
  w.verb_branch = 0.5;
  const LossReport r = compose_total(v, w);
  CHECK(r.detection == doctest::Approx(5 * 1.0 + 2 * 2.0 + 3.0));
  CHECK(r.verb == doctest::Approx(4.0 + 5.0));
  CHECK(r.total == doctest::Approx(r.detection + 0.5 * r.verb));
  v.action = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(compose_total(v, w), NonFiniteError);

  LossVars vars;
  vars.box = ag::Var(Matrix::Constant(1, 1, 1.0));
  vars.caption = ag::Var(Matrix::Constant(1, 1, 2.0));
  CHECK(weighted_total(vars, LossWeights{}).item() == doctest::Approx(5.0 + 2.0));
}

}
