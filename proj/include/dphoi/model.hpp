#pragma once

// Miniature two-decoder detection transformer: strided convolutional patch
// embedder, post-norm transformer encoder, a detection decoder, an
// interaction decoder fed with selected person embeddings, and per-query
// prediction heads.

#include "dphoi/autograd.hpp"
#include "dphoi/image.hpp"
#include "dphoi/nn.hpp"

#include "json.hpp"

#include <cstdint>
#include <vector>

namespace dphoi {

struct ModelConfig {
  int image_channels = 3;
  int embed_dim = 256;
  int num_queries = 100;
  int num_encoder_layers = 6;
  int num_decoder_layers = 3;  // shared by both decoders
  int num_heads = 8;
  int num_object_classes = 80;
  int num_verb_classes = 117;
  double rpq_threshold = 0.9;
  int ffn_hidden_dim = 2048;

  // Patch embedder: two non-overlapping strided convolutions.
  int stem_hidden_dim = 64;
  int stem_kernel1 = 4;
  int stem_kernel2 = 2;

  int person_class_id = 0;
  int proj_dim = 64;         // caption alignment space
  double temperature = 0.07;  // caption InfoNCE
  double init_std = 0.02;
  bool aux_loss = false;      // per-layer deep supervision
  bool detach_rpq = false;    // stop verb-branch gradients at the person queries
  bool dn_enabled = true;     // allocate denoising-query encoder parameters
  std::uint64_t seed = 0;

  [[nodiscard]] int patch_size() const { return stem_kernel1 * stem_kernel2; }
  // Throws ConfigError listing every violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct EncoderOutput {
  ag::Var features;             // V_e [tokens x embed_dim]
  Matrix positional_encoding;   // [tokens x embed_dim]
  std::vector<bool> token_mask;  // true = padded, never attended
  int grid_height = 0;
  int grid_width = 0;

  [[nodiscard]] Index num_tokens() const { return features.rows(); }
};

enum class DecoderKind { detection, interaction };
enum class HeadKind { detection, verb };

struct DecoderState {
  DecoderKind origin = DecoderKind::detection;
  ag::Var queries;                  // positional queries (Q_o or Q_p)
  ag::Var initial;                  // o_0
  ag::Var output;                   // o_d or o_a, after the final norm
  std::vector<ag::Var> layer_outputs;  // normed output of every layer (last == output)
  // Cross-attention weights, [layer][head] -> [n_q x num_tokens].
  std::vector<std::vector<Matrix>> attention;
};

struct Predictions {
  HeadKind kind = HeadKind::detection;
  ag::Var boxes;          // [n_q x 4] sigmoid cxcywh
  ag::Var object_logits;  // [n_q x (classes + 1)], last column = no-object
  ag::Var verb_logits;    // [n_p x C_a]
  std::vector<Predictions> aux;  // intermediate decoder layers, when enabled
};

class Model {
 public:
  explicit Model(const ModelConfig& config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] ParamStore& params() { return params_; }
  [[nodiscard]] const ParamStore& params() const { return params_; }

  [[nodiscard]] EncoderOutput embed_and_encode(const Image& image) const;

  // queries and initial are [n x embed_dim]; `self_allowed` optionally masks
  // query-to-query self attention (denoising groups).
  [[nodiscard]] DecoderState detection_decode(const EncoderOutput& enc, const ag::Var& queries,
                                              const ag::Var& initial,
                                              const BoolMatrix& self_allowed = BoolMatrix()) const;
  // Throws EmptyRpqError on zero rows.
  [[nodiscard]] DecoderState interaction_decode(const EncoderOutput& enc, const ag::Var& rpq,
                                                const ag::Var& initial) const;
  [[nodiscard]] Predictions predict_heads(const DecoderState& state, HeadKind which) const;

  [[nodiscard]] ag::Var learnable_queries() const { return query_embed_; }
  // o_0: zeros.
  [[nodiscard]] ag::Var initial_embeddings(Index n) const;

  // Caption alignment projection followed by L2 normalization.
  [[nodiscard]] ag::Var project_for_alignment(const ag::Var& embeddings) const;

  // Denoising-query encoders (present when config.dn_enabled).
  [[nodiscard]] ag::Var encode_dn_boxes(const ag::Var& boxes) const;
  [[nodiscard]] ag::Var encode_dn_labels(const std::vector<int>& labels) const;

 private:
  struct EncoderLayer {
    nn::MultiHeadAttention self_attn;
    nn::Linear ffn1, ffn2;
    nn::LayerNorm norm1, norm2;
  };
  struct DecoderLayer {
    nn::MultiHeadAttention self_attn, cross_attn;
    nn::Linear ffn1, ffn2;
    nn::LayerNorm norm1, norm2, norm3;
  };
  struct Decoder {
    std::vector<DecoderLayer> layers;
    nn::LayerNorm final_norm;
  };

  DecoderState run_decoder(const Decoder& decoder, DecoderKind kind, const EncoderOutput& enc,
                           const ag::Var& queries, const ag::Var& initial,
                           const BoolMatrix& self_allowed) const;
  Predictions detection_heads(const ag::Var& embeddings) const;

  ModelConfig config_;
  ParamStore params_;
  nn::Linear stem1_, stem2_, input_proj_;
  std::vector<EncoderLayer> encoder_;
  ag::Var query_embed_;
  Decoder detection_decoder_;
  Decoder interaction_decoder_;
  nn::Mlp box_head_;
  nn::Linear object_head_;
  nn::Linear verb_head_;
  nn::Linear caption_proj_;
  nn::Mlp dn_box_encoder_;
  ag::Var dn_label_embed_;
};

// Fixed 2-D sine positional encoding over a grid, interleaved sin/cos per
// axis, y features first then x features.
Matrix sine_positional_encoding(int grid_height, int grid_width, int embed_dim);

}  // namespace dphoi
