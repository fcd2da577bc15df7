#include "doctest.h"
#include "test_util.hpp"

#include "dphoi/errors.hpp"
#include "dphoi/matching.hpp"

#include <limits>
#include <numeric>

using namespace dphoi;

namespace {

// Exhaustive minimum over injective maps from the smaller side.
double brute_force_cost(const Matrix& cost) {
  const bool by_rows = cost.rows() <= cost.cols();
  const Index small = by_rows ? cost.rows() : cost.cols();
  const Index large = by_rows ? cost.cols() : cost.rows();
  std::vector<Index> perm(static_cast<std::size_t>(large));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (Index i = 0; i < small; ++i) s += by_rows ? cost(i, perm[i]) : cost(perm[i], i);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST_SUITE("matching") {

TEST_CASE("hungarian equals exhaustive search on random matrices") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(1, 5);
  for (int trial = 0; trial < 500; ++trial) {
    const Matrix cost = testutil::random_matrix(dim(rng), dim(rng), rng, -3.0, 3.0);
    const MatchResult m = hungarian_match(cost);
    REQUIRE(m.pairs.size() == static_cast<std::size_t>(std::min(cost.rows(), cost.cols())));
    double s = 0.0;
    for (const auto& [q, t] : m.pairs) s += cost(q, t);
    CHECK(m.total_cost == doctest::Approx(s).epsilon(1e-12));
    CHECK(m.total_cost == doctest::Approx(brute_force_cost(cost)).epsilon(1e-12));
  }
}

TEST_CASE("assignment is injective and unmatched queries are listed") {
  Matrix cost(4, 2);
  cost << 5, 1, 1, 5, 9, 9, 0.5, 0.5;
  const MatchResult m = hungarian_match(cost);
  REQUIRE(m.pairs.size() == 2);
  CHECK(m.pairs[0] == std::pair<Index, Index>{0, 1});
  CHECK(m.pairs[1] == std::pair<Index, Index>{3, 0});
  CHECK(m.total_cost == doctest::Approx(1.5));
  CHECK(m.unmatched_queries == std::vector<Index>{1, 2});
}

TEST_CASE("empty and non-finite costs") {
  const MatchResult m = hungarian_match(Matrix(3, 0));
  CHECK(m.pairs.empty());
  CHECK(m.unmatched_queries.size() == 3);
  Matrix bad = Matrix::Zero(2, 2);
  bad(1, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(hungarian_match(bad), DataError);
}

TEST_CASE("IoU and GIoU closed forms") {
  const BoxXYXY a{0, 0, 2, 2};
  const BoxXYXY b{1, 1, 3, 3};
  CHECK(box_iou(a, b) == doctest::Approx(1.0 / 7.0));
  // enclosing 3x3 = 9, union 7
  CHECK(generalized_iou(a, b) == doctest::Approx(1.0 / 7.0 - 2.0 / 9.0));
  CHECK(generalized_iou(a, a) == doctest::Approx(1.0));
  const BoxXYXY far{10, 10, 12, 12};
  CHECK(box_iou(a, far) == 0.0);
  CHECK(generalized_iou(a, far) == doctest::Approx(8.0 / 144.0 - 1.0));
  const BoxXYXY c = to_xyxy(0.5, 0.5, 0.2, 0.4);
  CHECK(c.x0 == doctest::Approx(0.4));
  CHECK(c.y1 == doctest::Approx(0.7));
}

TEST_CASE("GIoU stays in [-1, 1] on random boxes") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int i = 0; i < 1000; ++i) {
    const BoxXYXY a = to_xyxy(u(rng), u(rng), u(rng), u(rng));
    const BoxXYXY b = to_xyxy(u(rng), u(rng), u(rng), u(rng));
    const double g = generalized_iou(a, b);
    CHECK(g >= -1.0 - 1e-12);
    CHECK(g <= 1.0 + 1e-12);
    CHECK(g <= box_iou(a, b) + 1e-12);
  }
}

TEST_CASE("detection cost prefers the right class and the right box") {
  Matrix probs(2, 3);
  probs << 0.9, 0.05, 0.05, 0.1, 0.8, 0.1;
  Matrix pred(2, 4);
  pred << 0.3, 0.3, 0.2, 0.2, 0.7, 0.7, 0.2, 0.2;
  Matrix tgt(2, 4);
  tgt << 0.7, 0.7, 0.2, 0.2, 0.3, 0.3, 0.2, 0.2;
  const Matrix cost = detection_match_cost(probs, pred, tgt, {1, 0}, MatchCostWeights{});
  const MatchResult m = hungarian_match(cost);
  CHECK(m.pairs[0].second == 1);
  CHECK(m.pairs[1].second == 0);
}

}
