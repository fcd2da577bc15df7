#pragma once

#include "dphoi/autograd.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace dphoi {

// Which part of the network a parameter belongs to. Transfer strategies
// select parameters by tag.
enum class ComponentTag : std::uint8_t {
  backbone = 0,
  encoder = 1,
  detection_decoder = 2,
  interaction_decoder = 3,
  heads = 4,
  dn = 5,
};

std::string_view to_string(ComponentTag tag);
ComponentTag component_tag_from_string(std::string_view name);

struct NamedParameter {
  std::string name;
  ComponentTag tag;
  ag::Var var;
};

// Ordered registry of trainable tensors. Order is the registration order and
// is what the optimizer and checkpoint writer iterate over.
class ParamStore {
 public:
  ag::Var add(std::string name, ComponentTag tag, Matrix init);

  [[nodiscard]] const std::vector<NamedParameter>& entries() const { return entries_; }
  [[nodiscard]] std::vector<NamedParameter>& entries() { return entries_; }
  [[nodiscard]] const NamedParameter* find(std::string_view name) const;
  [[nodiscard]] std::size_t scalar_count() const;

  void zero_grad();

 private:
  std::vector<NamedParameter> entries_;
};

// Deterministic initializers.
Matrix truncated_normal(Index rows, Index cols, double stddev, std::mt19937_64& rng);
Matrix standard_normal(Index rows, Index cols, std::mt19937_64& rng);

namespace nn {

struct Linear {
  ag::Var weight;  // [in x out]
  ag::Var bias;    // [1 x out]

  static Linear create(ParamStore& store, const std::string& prefix, ComponentTag tag, Index in,
                       Index out, double init_std, std::mt19937_64& rng);
  [[nodiscard]] ag::Var operator()(const ag::Var& x) const { return ag::linear(x, weight, bias); }
};

struct LayerNorm {
  ag::Var gamma;
  ag::Var beta;

  static LayerNorm create(ParamStore& store, const std::string& prefix, ComponentTag tag, Index dim);
  [[nodiscard]] ag::Var operator()(const ag::Var& x) const {
    return ag::layer_norm_rows(x, gamma, beta);
  }
};

// Linear layers with ReLU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  static Mlp create(ParamStore& store, const std::string& prefix, ComponentTag tag,
                    const std::vector<Index>& dims, double init_std, std::mt19937_64& rng);
  [[nodiscard]] ag::Var operator()(const ag::Var& x) const;
};

struct AttentionResult {
  ag::Var output;
  std::vector<Matrix> weights;  // one [n_q x n_k] matrix per head
};

struct MultiHeadAttention {
  Linear q_proj;
  Linear k_proj;
  Linear v_proj;
  Linear out_proj;
  int num_heads = 1;

  static MultiHeadAttention create(ParamStore& store, const std::string& prefix, ComponentTag tag,
                                   Index dim, int num_heads, double init_std,
                                   std::mt19937_64& rng);

  // `allowed` is [n_q x n_k]; empty means every key is visible.
  [[nodiscard]] AttentionResult operator()(const ag::Var& query, const ag::Var& key,
                                           const ag::Var& value,
                                           const BoolMatrix& allowed = BoolMatrix()) const;
};

}  // namespace nn
}  // namespace dphoi
