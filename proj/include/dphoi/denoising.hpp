#pragma once

// Denoising (DN) query construction for detection samples: ground-truth
// boxes are jittered, optionally relabelled, and encoded into an auxiliary
// query group that must reconstruct the originals.

#include "dphoi/autograd.hpp"
#include "dphoi/model.hpp"

#include <random>
#include <vector>

namespace dphoi {

struct DnOptions {
  bool enabled = true;
  double noise_scale = 0.4;
  double label_flip_prob = 0.2;
};

struct DenoisedQueryGroup {
  Matrix noised_boxes;             // [n_dn x 4] cxcywh, valid and inside [0,1]
  std::vector<int> noised_labels;  // after random flips
  ag::Var encoded_queries;         // positional part, box FFN output [n_dn x embed_dim]
  ag::Var content;                 // label embeddings [n_dn x embed_dim]
  double noise_scale = 0.0;
  double label_flip_prob = 0.0;
};

// Centers move by up to +-noise_scale * (w, h) / 2 and extents scale by a
// factor in [1 - noise_scale, 1 + noise_scale]; the result is clamped to the
// unit square with a minimum extent. Zero noise returns the input boxes
// untouched.
Matrix jitter_boxes(const Matrix& boxes, double noise_scale, std::mt19937_64& rng);

// Requires at least one ground-truth box.
DenoisedQueryGroup build_dn_queries(const Model& model, const Matrix& gt_boxes,
                                    const std::vector<int>& gt_labels, double noise_scale,
                                    double label_flip_prob, std::mt19937_64& rng);

// Self-attention visibility for [dn group; learnable queries]: each group
// sees only itself.
BoolMatrix dn_attention_mask(Index num_dn, Index num_learnable);

}  // namespace dphoi
