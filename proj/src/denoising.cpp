#include "dphoi/denoising.hpp"

#include "dphoi/errors.hpp"

#include <algorithm>

namespace dphoi {

namespace {
constexpr double kMinExtent = 1e-3;
}

Matrix jitter_boxes(const Matrix& boxes, double noise_scale, std::mt19937_64& rng) {
  if (boxes.cols() != 4) throw ShapeError("jitter_boxes: boxes must be [n x 4]");
  if (noise_scale < 0) throw ConfigError("noise_scale must be non-negative");
  if (noise_scale == 0.0) return boxes;

  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Matrix out(boxes.rows(), 4);
  for (Index i = 0; i < boxes.rows(); ++i) {
    const double w = boxes(i, 2);
    const double h = boxes(i, 3);
    double cx = boxes(i, 0) + unit(rng) * noise_scale * w / 2.0;
    double cy = boxes(i, 1) + unit(rng) * noise_scale * h / 2.0;
    double nw = w * (1.0 + unit(rng) * noise_scale);
    double nh = h * (1.0 + unit(rng) * noise_scale);

    // Clamp the corners into the unit square, then enforce a minimum extent.
    double x0 = std::clamp(cx - nw / 2.0, 0.0, 1.0 - kMinExtent);
    double x1 = std::clamp(cx + nw / 2.0, x0 + kMinExtent, 1.0);
    double y0 = std::clamp(cy - nh / 2.0, 0.0, 1.0 - kMinExtent);
    double y1 = std::clamp(cy + nh / 2.0, y0 + kMinExtent, 1.0);
    out(i, 0) = (x0 + x1) / 2.0;
    out(i, 1) = (y0 + y1) / 2.0;
    out(i, 2) = x1 - x0;
    out(i, 3) = y1 - y0;
  }
  return out;
}

DenoisedQueryGroup build_dn_queries(const Model& model, const Matrix& gt_boxes,
                                    const std::vector<int>& gt_labels, double noise_scale,
                                    double label_flip_prob, std::mt19937_64& rng) {
  if (gt_boxes.rows() == 0) throw DataError("build_dn_queries: needs at least one ground-truth box");
  if (static_cast<Index>(gt_labels.size()) != gt_boxes.rows()) {
    throw ShapeError("build_dn_queries: one label per box required");
  }
  if (label_flip_prob < 0.0 || label_flip_prob > 1.0) throw ConfigError("label_flip_prob must be in [0, 1]");

  DenoisedQueryGroup g;
  g.noise_scale = noise_scale;
  g.label_flip_prob = label_flip_prob;
  g.noised_boxes = jitter_boxes(gt_boxes, noise_scale, rng);
  g.noised_labels = gt_labels;
  if (label_flip_prob > 0.0) {
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::uniform_int_distribution<int> any_class(0, model.config().num_object_classes - 1);
    for (int& label : g.noised_labels) {
      if (coin(rng) < label_flip_prob) label = any_class(rng);
    }
  }
  g.encoded_queries = model.encode_dn_boxes(ag::constant(g.noised_boxes));
  g.content = model.encode_dn_labels(g.noised_labels);
  return g;
}

BoolMatrix dn_attention_mask(Index num_dn, Index num_learnable) {
  const Index n = num_dn + num_learnable;
  BoolMatrix allowed = BoolMatrix::Constant(n, n, false);
  allowed.topLeftCorner(num_dn, num_dn).setConstant(true);
  allowed.bottomRightCorner(num_learnable, num_learnable).setConstant(true);
  return allowed;
}

}  // namespace dphoi
