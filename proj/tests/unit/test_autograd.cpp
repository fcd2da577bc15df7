#include "doctest.h"
#include "test_util.hpp"

#include "dphoi/autograd.hpp"
#include "dphoi/errors.hpp"

using namespace dphoi;
using testutil::fd_check;
using testutil::random_matrix;

TEST_SUITE("autograd") {

TEST_CASE("elementwise and matrix ops match finite differences") {
  std::mt19937_64 rng(1);
  ag::Var a(random_matrix(3, 4, rng), true);
  ag::Var b(random_matrix(4, 2, rng), true);
  ag::Var c(random_matrix(3, 4, rng, 0.5, 2.0), true);
  ag::Var bias(random_matrix(1, 2, rng), true);
  const Matrix w = random_matrix(3, 2, rng);

  // Fixed random weights turn each output into a scalar loss.
  const Matrix w34 = random_matrix(3, 4, rng);
  auto dot34 = [&](const ag::Var& out) { return ag::sum(ag::mul(out, ag::constant(w34))); };
  auto dot32 = [&](const ag::Var& out) { return ag::sum(ag::mul(out, ag::constant(w))); };

  CHECK(fd_check(a, [&] { return dot32(ag::matmul(a, b)); }) < 1e-6);
  CHECK(fd_check(b, [&] { return dot32(ag::linear(a, b, bias)); }) < 1e-6);
  CHECK(fd_check(bias, [&] { return dot32(ag::linear(a, b, bias)); }) < 1e-6);
  CHECK(fd_check(a, [&] { return dot34(ag::sigmoid(a)); }) < 1e-6);
  CHECK(fd_check(a, [&] { return dot34(ag::exp(a)); }) < 1e-6);
  CHECK(fd_check(c, [&] { return dot34(ag::log(c)); }) < 1e-6);
  CHECK(fd_check(c, [&] { return dot34(ag::pow(c, 1.5)); }) < 1e-6);
  CHECK(fd_check(a, [&] { return dot34(ag::div(a, c)); }) < 1e-6);
  CHECK(fd_check(c, [&] { return dot34(ag::div(a, c)); }) < 1e-6);
  CHECK(fd_check(a, [&] { return dot34(ag::softmax_rows(a)); }) < 1e-6);
  CHECK(fd_check(a, [&] { return dot34(ag::log_softmax_rows(a)); }) < 1e-6);
  CHECK(fd_check(a, [&] { return dot34(ag::l2_normalize_rows(a)); }) < 1e-6);
  CHECK(fd_check(a, [&] { return ag::sum(ag::col_mean(a)); }) < 1e-6);
  CHECK(fd_check(a, [&] { return ag::sum(ag::mul(ag::col_max(a), ag::constant(w34.topRows(1)))); }) < 1e-6);
}

TEST_CASE("layer norm gradients w.r.t. input, gain and shift") {
  std::mt19937_64 rng(2);
  ag::Var x(random_matrix(3, 5, rng), true);
  ag::Var g(random_matrix(1, 5, rng, 0.5, 1.5), true);
  ag::Var b(random_matrix(1, 5, rng), true);
  const Matrix w = random_matrix(3, 5, rng);
  auto loss = [&] { return ag::sum(ag::mul(ag::layer_norm_rows(x, g, b), ag::constant(w))); };
  CHECK(fd_check(x, loss) < 1e-5);
  CHECK(fd_check(g, loss) < 1e-6);
  CHECK(fd_check(b, loss) < 1e-6);
}

TEST_CASE("masked softmax puts exactly zero weight on hidden entries") {
  std::mt19937_64 rng(3);
  ag::Var a(random_matrix(2, 4, rng), true);
  BoolMatrix allowed(2, 4);
  allowed << true, false, true, false, false, false, false, false;
  const Matrix s = ag::softmax_rows(a, allowed).value();
  CHECK(s(0, 1) == 0.0);
  CHECK(s(0, 3) == 0.0);
  CHECK(s(0, 0) + s(0, 2) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.row(1).isZero());
  const Matrix w = random_matrix(2, 4, rng);
  CHECK(fd_check(a, [&] { return ag::sum(ag::mul(ag::softmax_rows(a, allowed), ag::constant(w))); }) < 1e-6);
}

TEST_CASE("structural ops route gradients to the right entries") {
  std::mt19937_64 rng(4);
  ag::Var a(random_matrix(4, 3, rng), true);
  const std::vector<Index> rows{2, 0};
  const std::vector<Index> cols{1, 2, 0, 1};
  const Matrix w2 = random_matrix(2, 3, rng);
  CHECK(fd_check(a, [&] { return ag::sum(ag::mul(ag::select_rows(a, rows), ag::constant(w2))); }) < 1e-6);
  CHECK(fd_check(a, [&] { return ag::sum(ag::pick_per_row(a, cols)); }) < 1e-6);
  CHECK(fd_check(a, [&] { return ag::sum(ag::gather(a, {0, -1, 5, 5}, 2, 2)); }) < 1e-6);
  auto parts = [&] { return std::vector<ag::Var>{a, ag::scale(a, 2.0)}; };
  CHECK(fd_check(a, [&] { return ag::sum(ag::pow(ag::concat_rows(parts()), 2.0)); }) < 1e-6);
  CHECK(fd_check(a, [&] { return ag::sum(ag::pow(ag::concat_cols(parts()), 2.0)); }) < 1e-6);
}

TEST_CASE("no-grad mode records nothing and detach cuts the graph") {
  ag::Var p(Matrix::Constant(2, 2, 1.0), true);
  {
    ag::NoGradGuard guard;
    CHECK_FALSE(ag::grad_enabled());
    const ag::Var y = ag::sum(ag::mul(p, p));
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(ag::grad_enabled());
  const ag::Var y = ag::sum(ag::mul(ag::detach(p), p));
  ag::backward(y);
  CHECK(p.grad().isApprox(Matrix::Constant(2, 2, 1.0)));
}

TEST_CASE("shape mismatches are reported") {
  ag::Var a(Matrix::Zero(2, 3));
  ag::Var b(Matrix::Zero(3, 2));
  CHECK_THROWS_AS(ag::add(a, b), ShapeError);
  CHECK_THROWS_AS(ag::matmul(a, a), ShapeError);
}

}
