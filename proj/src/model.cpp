#include "dphoi/model.hpp"

#include "dphoi/errors.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace dphoi {

void ModelConfig::validate() const {
  std::ostringstream problems;
  auto require = [&](bool ok, const char* msg) {
    if (!ok) problems << "\n  - " << msg;
  };
  require(image_channels > 0, "image_channels must be positive");
  require(embed_dim > 0, "embed_dim must be positive");
  require(embed_dim % 2 == 0, "embed_dim must be even (sine positional encoding)");
  require(num_heads > 0 && embed_dim % num_heads == 0, "embed_dim must be divisible by num_heads");
  require(num_queries >= 1, "num_queries must be >= 1");
  require(num_encoder_layers >= 1, "num_encoder_layers must be >= 1");
  require(num_decoder_layers >= 1, "num_decoder_layers must be >= 1");
  require(num_object_classes >= 1, "num_object_classes must be >= 1");
  require(num_verb_classes >= 1, "num_verb_classes must be >= 1");
  require(rpq_threshold > 0.0 && rpq_threshold < 1.0, "rpq_threshold must lie strictly in (0, 1)");
  require(ffn_hidden_dim >= 1, "ffn_hidden_dim must be positive");
  require(stem_hidden_dim >= 1, "stem_hidden_dim must be positive");
  require(stem_kernel1 >= 1 && stem_kernel2 >= 1, "stem kernels must be positive");
  require(person_class_id >= 0 && person_class_id < num_object_classes,
          "person_class_id must index an object class");
  require(proj_dim >= 1, "proj_dim must be positive");
  require(temperature > 0.0, "temperature must be positive");
  require(init_std > 0.0, "init_std must be positive");
  const std::string text = problems.str();
  if (!text.empty()) throw ConfigError("invalid model config:" + text);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_channels", c.image_channels},
                     {"embed_dim", c.embed_dim},
                     {"num_queries", c.num_queries},
                     {"num_encoder_layers", c.num_encoder_layers},
                     {"num_decoder_layers", c.num_decoder_layers},
                     {"num_heads", c.num_heads},
                     {"num_object_classes", c.num_object_classes},
                     {"num_verb_classes", c.num_verb_classes},
                     {"rpq_threshold", c.rpq_threshold},
                     {"ffn_hidden_dim", c.ffn_hidden_dim},
                     {"stem_hidden_dim", c.stem_hidden_dim},
                     {"stem_kernel1", c.stem_kernel1},
                     {"stem_kernel2", c.stem_kernel2},
                     {"person_class_id", c.person_class_id},
                     {"proj_dim", c.proj_dim},
                     {"temperature", c.temperature},
                     {"init_std", c.init_std},
                     {"aux_loss", c.aux_loss},
                     {"detach_rpq", c.detach_rpq},
                     {"dn_enabled", c.dn_enabled},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.image_channels = j.value("image_channels", d.image_channels);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.num_queries = j.value("num_queries", d.num_queries);
  c.num_encoder_layers = j.value("num_encoder_layers", d.num_encoder_layers);
  c.num_decoder_layers = j.value("num_decoder_layers", d.num_decoder_layers);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.num_object_classes = j.value("num_object_classes", d.num_object_classes);
  c.num_verb_classes = j.value("num_verb_classes", d.num_verb_classes);
  c.rpq_threshold = j.value("rpq_threshold", d.rpq_threshold);
  c.ffn_hidden_dim = j.value("ffn_hidden_dim", d.ffn_hidden_dim);
  c.stem_hidden_dim = j.value("stem_hidden_dim", d.stem_hidden_dim);
  c.stem_kernel1 = j.value("stem_kernel1", d.stem_kernel1);
  c.stem_kernel2 = j.value("stem_kernel2", d.stem_kernel2);
  c.person_class_id = j.value("person_class_id", d.person_class_id);
  c.proj_dim = j.value("proj_dim", d.proj_dim);
  c.temperature = j.value("temperature", d.temperature);
  c.init_std = j.value("init_std", d.init_std);
  c.aux_loss = j.value("aux_loss", d.aux_loss);
  c.detach_rpq = j.value("detach_rpq", d.detach_rpq);
  c.dn_enabled = j.value("dn_enabled", d.dn_enabled);
  c.seed = j.value("seed", d.seed);
}

Matrix sine_positional_encoding(int grid_height, int grid_width, int embed_dim) {
  constexpr double kTemperature = 10000.0;
  constexpr double kEps = 1e-6;
  const double scale = 2.0 * std::numbers::pi;
  const int y_feats = embed_dim / 2;
  const int x_feats = embed_dim - y_feats;
  Matrix pos(static_cast<Index>(grid_height) * grid_width, embed_dim);

  auto encode = [&](double coord, int feats, int offset, Index row) {
    for (int i = 0; i < feats; ++i) {
      const double dim_t = std::pow(kTemperature, 2.0 * (i / 2) / static_cast<double>(feats));
      const double v = coord / dim_t;
      pos(row, offset + i) = (i % 2 == 0) ? std::sin(v) : std::cos(v);
    }
  };
  for (int y = 0; y < grid_height; ++y) {
    for (int x = 0; x < grid_width; ++x) {
      const Index row = static_cast<Index>(y) * grid_width + x;
      const double ny = (y + 1) / (grid_height + kEps) * scale;
      const double nx = (x + 1) / (grid_width + kEps) * scale;
      encode(ny, y_feats, 0, row);
      encode(nx, x_feats, y_feats, row);
    }
  }
  return pos;
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const Index d = config_.embed_dim;
  const double s = config_.init_std;
  const Index patch1 = static_cast<Index>(config_.stem_kernel1) * config_.stem_kernel1 * config_.image_channels;
  const Index patch2 = static_cast<Index>(config_.stem_kernel2) * config_.stem_kernel2 * config_.stem_hidden_dim;

  stem1_ = nn::Linear::create(params_, "backbone.conv1", ComponentTag::backbone, patch1,
                              config_.stem_hidden_dim, s, rng);
  stem2_ = nn::Linear::create(params_, "backbone.conv2", ComponentTag::backbone, patch2, d, s, rng);
  input_proj_ = nn::Linear::create(params_, "encoder.input_proj", ComponentTag::encoder, d, d, s, rng);

  for (int i = 0; i < config_.num_encoder_layers; ++i) {
    const std::string p = "encoder.layers." + std::to_string(i);
    const auto tag = ComponentTag::encoder;
    EncoderLayer layer{
        nn::MultiHeadAttention::create(params_, p + ".self_attn", tag, d, config_.num_heads, s, rng),
        nn::Linear::create(params_, p + ".ffn1", tag, d, config_.ffn_hidden_dim, s, rng),
        nn::Linear::create(params_, p + ".ffn2", tag, config_.ffn_hidden_dim, d, s, rng),
        nn::LayerNorm::create(params_, p + ".norm1", tag, d),
        nn::LayerNorm::create(params_, p + ".norm2", tag, d)};
    encoder_.push_back(std::move(layer));
  }

  // Query embeddings follow the usual embedding-table convention (unit normal)
  // so that queries start distinguishable.
  query_embed_ = params_.add("detection_decoder.query_embed", ComponentTag::detection_decoder,
                             standard_normal(config_.num_queries, d, rng));

  auto make_decoder = [&](const std::string& prefix, ComponentTag tag) {
    Decoder dec;
    for (int i = 0; i < config_.num_decoder_layers; ++i) {
      const std::string p = prefix + ".layers." + std::to_string(i);
      DecoderLayer layer{
          nn::MultiHeadAttention::create(params_, p + ".self_attn", tag, d, config_.num_heads, s, rng),
          nn::MultiHeadAttention::create(params_, p + ".cross_attn", tag, d, config_.num_heads, s, rng),
          nn::Linear::create(params_, p + ".ffn1", tag, d, config_.ffn_hidden_dim, s, rng),
          nn::Linear::create(params_, p + ".ffn2", tag, config_.ffn_hidden_dim, d, s, rng),
          nn::LayerNorm::create(params_, p + ".norm1", tag, d),
          nn::LayerNorm::create(params_, p + ".norm2", tag, d),
          nn::LayerNorm::create(params_, p + ".norm3", tag, d)};
      dec.layers.push_back(std::move(layer));
    }
    dec.final_norm = nn::LayerNorm::create(params_, prefix + ".final_norm", tag, d);
    return dec;
  };
  detection_decoder_ = make_decoder("detection_decoder", ComponentTag::detection_decoder);
  interaction_decoder_ = make_decoder("interaction_decoder", ComponentTag::interaction_decoder);

  box_head_ = nn::Mlp::create(params_, "heads.box", ComponentTag::heads, {d, d, d, 4}, s, rng);
  object_head_ = nn::Linear::create(params_, "heads.object", ComponentTag::heads, d,
                                    config_.num_object_classes + 1, s, rng);
  verb_head_ = nn::Linear::create(params_, "heads.verb", ComponentTag::heads, d,
                                  config_.num_verb_classes, s, rng);
  caption_proj_ = nn::Linear::create(params_, "heads.caption_proj", ComponentTag::heads, d,
                                     config_.proj_dim, s, rng);

  if (config_.dn_enabled) {
    dn_box_encoder_ = nn::Mlp::create(params_, "dn.box_encoder", ComponentTag::dn, {4, d, d}, s, rng);
    dn_label_embed_ = params_.add("dn.label_embed", ComponentTag::dn,
                                  truncated_normal(config_.num_object_classes, d, s, rng));
  }
}

EncoderOutput Model::embed_and_encode(const Image& image) const {
  const int k1 = config_.stem_kernel1;
  const int k2 = config_.stem_kernel2;
  const int c = config_.image_channels;
  if (image.channels != c) {
    throw ShapeError("embed_and_encode: image has " + std::to_string(image.channels) +
                     " channels, embedder expects " + std::to_string(c));
  }
  if (image.height < config_.patch_size() || image.width < config_.patch_size()) {
    throw ShapeError("embed_and_encode: image smaller than the patch size");
  }
  if (image.pixels.size() != static_cast<std::size_t>(image.height) * image.width * c) {
    throw ShapeError("embed_and_encode: pixel buffer size does not match dimensions");
  }

  // First strided convolution == patchify + shared linear map.
  const int gh1 = image.height / k1;
  const int gw1 = image.width / k1;
  Matrix patches(static_cast<Index>(gh1) * gw1, static_cast<Index>(k1) * k1 * c);
  for (int gy = 0; gy < gh1; ++gy) {
    for (int gx = 0; gx < gw1; ++gx) {
      const Index row = static_cast<Index>(gy) * gw1 + gx;
      Index col = 0;
      for (int dy = 0; dy < k1; ++dy) {
        for (int dx = 0; dx < k1; ++dx) {
          for (int ch = 0; ch < c; ++ch) patches(row, col++) = image.at(gy * k1 + dy, gx * k1 + dx, ch);
        }
      }
    }
  }
  const ag::Var h1 = ag::relu(stem1_(ag::constant(std::move(patches))));

  // Second strided convolution over k2 x k2 neighbourhoods of the first grid.
  const int gh = gh1 / k2;
  const int gw = gw1 / k2;
  const Index hidden = config_.stem_hidden_dim;
  const Index width2 = static_cast<Index>(k2) * k2 * hidden;
  std::vector<Index> index(static_cast<std::size_t>(gh) * gw * width2);
  std::size_t k = 0;
  for (int ty = 0; ty < gh; ++ty) {
    for (int tx = 0; tx < gw; ++tx) {
      for (int dy = 0; dy < k2; ++dy) {
        for (int dx = 0; dx < k2; ++dx) {
          const Index cell = static_cast<Index>(ty * k2 + dy) * gw1 + (tx * k2 + dx);
          for (Index h = 0; h < hidden; ++h) index[k++] = cell * hidden + h;
        }
      }
    }
  }
  const ag::Var grouped = ag::gather(h1, std::move(index), static_cast<Index>(gh) * gw, width2);
  ag::Var src = input_proj_(ag::relu(stem2_(grouped)));

  EncoderOutput out;
  out.grid_height = gh;
  out.grid_width = gw;
  out.positional_encoding = sine_positional_encoding(gh, gw, config_.embed_dim);
  out.token_mask.assign(static_cast<std::size_t>(gh) * gw, false);

  const ag::Var pos = ag::constant(out.positional_encoding);
  for (const auto& layer : encoder_) {
    const ag::Var qk = ag::add(src, pos);
    src = layer.norm1(ag::add(src, layer.self_attn(qk, qk, src).output));
    src = layer.norm2(ag::add(src, layer.ffn2(ag::relu(layer.ffn1(src)))));
  }
  out.features = src;
  return out;
}

ag::Var Model::initial_embeddings(Index n) const {
  return ag::constant(Matrix::Zero(n, config_.embed_dim));
}

DecoderState Model::run_decoder(const Decoder& decoder, DecoderKind kind, const EncoderOutput& enc,
                                const ag::Var& queries, const ag::Var& initial,
                                const BoolMatrix& self_allowed) const {
  const Index d = config_.embed_dim;
  if (queries.cols() != d) {
    throw ShapeError("decoder: query width " + std::to_string(queries.cols()) +
                     " != embed_dim " + std::to_string(d));
  }
  if (initial.rows() != queries.rows() || initial.cols() != d) {
    throw ShapeError("decoder: initial embeddings must match the query shape");
  }
  if (enc.features.cols() != d) throw ShapeError("decoder: encoder width != embed_dim");
  const Index nq = queries.rows();
  const Index nt = enc.num_tokens();
  if (self_allowed.size() != 0 && (self_allowed.rows() != nq || self_allowed.cols() != nq)) {
    throw ShapeError("decoder: self-attention mask must be [n_q x n_q]");
  }

  BoolMatrix cross_allowed;
  bool any_padded = false;
  for (bool m : enc.token_mask) any_padded = any_padded || m;
  if (any_padded) {
    cross_allowed.resize(nq, nt);
    for (Index j = 0; j < nt; ++j) cross_allowed.col(j).setConstant(!enc.token_mask[static_cast<std::size_t>(j)]);
  }

  const ag::Var keys = ag::add(enc.features, ag::constant(enc.positional_encoding));
  DecoderState state;
  state.origin = kind;
  state.queries = queries;
  state.initial = initial;
  ag::Var tgt = initial;
  for (const auto& layer : decoder.layers) {
    const ag::Var qk = ag::add(tgt, queries);
    tgt = layer.norm1(ag::add(tgt, layer.self_attn(qk, qk, tgt, self_allowed).output));
    auto cross = layer.cross_attn(ag::add(tgt, queries), keys, enc.features, cross_allowed);
    tgt = layer.norm2(ag::add(tgt, cross.output));
    tgt = layer.norm3(ag::add(tgt, layer.ffn2(ag::relu(layer.ffn1(tgt)))));
    state.attention.push_back(std::move(cross.weights));
    state.layer_outputs.push_back(decoder.final_norm(tgt));
  }
  state.output = state.layer_outputs.back();
  return state;
}

DecoderState Model::detection_decode(const EncoderOutput& enc, const ag::Var& queries,
                                     const ag::Var& initial, const BoolMatrix& self_allowed) const {
  return run_decoder(detection_decoder_, DecoderKind::detection, enc, queries, initial, self_allowed);
}

DecoderState Model::interaction_decode(const EncoderOutput& enc, const ag::Var& rpq,
                                       const ag::Var& initial) const {
  if (!rpq.defined() || rpq.rows() == 0) {
    throw EmptyRpqError("interaction_decode: empty person-query set; skip this sample");
  }
  return run_decoder(interaction_decoder_, DecoderKind::interaction, enc, rpq, initial, BoolMatrix());
}

Predictions Model::detection_heads(const ag::Var& embeddings) const {
  Predictions p;
  p.kind = HeadKind::detection;
  p.boxes = ag::sigmoid(box_head_(embeddings));
  p.object_logits = object_head_(embeddings);
  return p;
}

Predictions Model::predict_heads(const DecoderState& state, HeadKind which) const {
  if (which == HeadKind::detection) {
    if (state.origin != DecoderKind::detection) {
      throw StateError("predict_heads: detection heads need detection-decoder output");
    }
    Predictions p = detection_heads(state.output);
    if (config_.aux_loss) {
      for (std::size_t i = 0; i + 1 < state.layer_outputs.size(); ++i) {
        p.aux.push_back(detection_heads(state.layer_outputs[i]));
      }
    }
    return p;
  }
  if (state.origin != DecoderKind::interaction) {
    throw StateError("predict_heads: verb head needs interaction-decoder output");
  }
  Predictions p;
  p.kind = HeadKind::verb;
  p.verb_logits = verb_head_(state.output);
  return p;
}

ag::Var Model::project_for_alignment(const ag::Var& embeddings) const {
  return ag::l2_normalize_rows(caption_proj_(embeddings));
}

ag::Var Model::encode_dn_boxes(const ag::Var& boxes) const {
  if (!config_.dn_enabled) throw StateError("denoising queries disabled in this model");
  if (boxes.cols() != 4) throw ShapeError("encode_dn_boxes: boxes must be [n x 4]");
  return dn_box_encoder_(boxes);
}

ag::Var Model::encode_dn_labels(const std::vector<int>& labels) const {
  if (!config_.dn_enabled) throw StateError("denoising queries disabled in this model");
  std::vector<Index> rows;
  rows.reserve(labels.size());
  for (int l : labels) {
    if (l < 0 || l >= config_.num_object_classes) throw DataError("denoising label out of range");
    rows.push_back(l);
  }
  return ag::select_rows(dn_label_embed_, rows);
}

}  // namespace dphoi
