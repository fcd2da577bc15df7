#include "dphoi/nn.hpp"

#include "dphoi/errors.hpp"

#include <array>
#include <cmath>

namespace dphoi {

namespace {
constexpr std::array<std::string_view, 6> kTagNames = {
    "backbone", "encoder", "detection_decoder", "interaction_decoder", "heads", "dn"};
}

std::string_view to_string(ComponentTag tag) { return kTagNames.at(static_cast<std::size_t>(tag)); }

ComponentTag component_tag_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kTagNames.size(); ++i) {
    if (kTagNames[i] == name) return static_cast<ComponentTag>(i);
  }
  throw DataError("unknown component tag '" + std::string(name) + "'");
}

ag::Var ParamStore::add(std::string name, ComponentTag tag, Matrix init) {
  if (find(name) != nullptr) throw ConfigError("duplicate parameter name " + name);
  ag::Var var(std::move(init), true);
  entries_.push_back({std::move(name), tag, var});
  return var;
}

const NamedParameter* ParamStore::find(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.var.value().size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

Matrix truncated_normal(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    double x = dist(rng);
    while (std::abs(x) > 2.0) x = dist(rng);
    m.data()[i] = x * stddev;
  }
  return m;
}

Matrix standard_normal(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

namespace nn {

Linear Linear::create(ParamStore& store, const std::string& prefix, ComponentTag tag, Index in,
                      Index out, double init_std, std::mt19937_64& rng) {
  Linear l;
  l.weight = store.add(prefix + ".weight", tag, truncated_normal(in, out, init_std, rng));
  l.bias = store.add(prefix + ".bias", tag, Matrix::Zero(1, out));
  return l;
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& prefix, ComponentTag tag,
                            Index dim) {
  LayerNorm n;
  n.gamma = store.add(prefix + ".gamma", tag, Matrix::Ones(1, dim));
  n.beta = store.add(prefix + ".beta", tag, Matrix::Zero(1, dim));
  return n;
}

Mlp Mlp::create(ParamStore& store, const std::string& prefix, ComponentTag tag,
                const std::vector<Index>& dims, double init_std, std::mt19937_64& rng) {
  if (dims.size() < 2) throw ConfigError("Mlp needs at least input and output widths");
  Mlp m;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    m.layers.push_back(Linear::create(store, prefix + ".layers." + std::to_string(i), tag, dims[i],
                                      dims[i + 1], init_std, rng));
  }
  return m;
}

ag::Var Mlp::operator()(const ag::Var& x) const {
  ag::Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = ag::relu(h);
  }
  return h;
}

MultiHeadAttention MultiHeadAttention::create(ParamStore& store, const std::string& prefix,
                                              ComponentTag tag, Index dim, int num_heads,
                                              double init_std, std::mt19937_64& rng) {
  if (num_heads <= 0 || dim % num_heads != 0) {
    throw ConfigError("embed_dim must be divisible by num_heads");
  }
  MultiHeadAttention a;
  a.num_heads = num_heads;
  a.q_proj = Linear::create(store, prefix + ".q_proj", tag, dim, dim, init_std, rng);
  a.k_proj = Linear::create(store, prefix + ".k_proj", tag, dim, dim, init_std, rng);
  a.v_proj = Linear::create(store, prefix + ".v_proj", tag, dim, dim, init_std, rng);
  a.out_proj = Linear::create(store, prefix + ".out_proj", tag, dim, dim, init_std, rng);
  return a;
}

AttentionResult MultiHeadAttention::operator()(const ag::Var& query, const ag::Var& key,
                                               const ag::Var& value,
                                               const BoolMatrix& allowed) const {
  const Index dim = query.cols();
  if (key.cols() != dim || value.cols() != dim || key.rows() != value.rows()) {
    throw ShapeError("attention: query/key/value widths or key/value lengths disagree");
  }
  const Index head_dim = dim / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  const ag::Var q = q_proj(query);
  const ag::Var k = k_proj(key);
  const ag::Var v = v_proj(value);

  AttentionResult result;
  std::vector<ag::Var> heads;
  heads.reserve(static_cast<std::size_t>(num_heads));
  for (int h = 0; h < num_heads; ++h) {
    const Index off = h * head_dim;
    const ag::Var qh = ag::slice_cols(q, off, head_dim);
    const ag::Var kh = ag::slice_cols(k, off, head_dim);
    const ag::Var vh = ag::slice_cols(v, off, head_dim);
    const ag::Var scores = ag::scale(ag::matmul(qh, ag::transpose(kh)), inv_sqrt);
    const ag::Var attn = ag::softmax_rows(scores, allowed);
    result.weights.push_back(attn.value());
    heads.push_back(ag::matmul(attn, vh));
  }
  result.output = out_proj(ag::concat_cols(heads));
  return result;
}

}  // namespace nn
}  // namespace dphoi
