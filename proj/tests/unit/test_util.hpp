#pragma once

#include "dphoi/autograd.hpp"
#include "dphoi/model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

namespace testutil {

using dphoi::Index;
using dphoi::Matrix;

// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero entries from
// turning round-off into a large ratio.
inline double rel_error(double analytic, double numeric, double floor = 1e-5) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Worst relative error between the analytic gradient of loss() w.r.t. x and
// central differences. `entries` limits how many coordinates are probed
// (spread evenly), 0 means all.
inline double fd_check(dphoi::ag::Var x, const std::function<dphoi::ag::Var()>& loss, Index entries = 0,
                       double h = 1e-6) {
  x.zero_grad();
  const dphoi::ag::Var l = loss();
  dphoi::ag::backward(l);
  const Matrix analytic = x.grad();
  Matrix& v = x.mutable_value();
  const Index n = v.size();
  const Index stride = entries == 0 || entries >= n ? 1 : n / entries;
  double worst = 0.0;
  for (Index k = 0; k < n; k += stride) {
    const double keep = v.data()[k];
    v.data()[k] = keep + h;
    const double up = loss().item();
    v.data()[k] = keep - h;
    const double down = loss().item();
    v.data()[k] = keep;
    worst = std::max(worst, rel_error(analytic.data()[k], (up - down) / (2 * h)));
  }
  x.zero_grad();
  return worst;
}

inline Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

// 3 queries over an 8-token grid (16x32 image, patch 8).
inline dphoi::ModelConfig tiny_config() {
  dphoi::ModelConfig c;
  c.embed_dim = 8;
  c.num_queries = 3;
  c.num_encoder_layers = 1;
  c.num_decoder_layers = 1;
  c.num_heads = 2;
  c.num_object_classes = 3;
  c.num_verb_classes = 10;
  c.ffn_hidden_dim = 16;
  c.stem_hidden_dim = 4;
  c.proj_dim = 8;
  c.init_std = 0.3;
  return c;
}

inline dphoi::Image random_image(int h, int w, std::mt19937_64& rng) {
  dphoi::Image img(h, w, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

inline std::filesystem::path fixture(const std::string& name) { return std::filesystem::path(DPHOI_FIXTURES) / name; }

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("dphoi_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
