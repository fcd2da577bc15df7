#include "dphoi/transfer.hpp"

#include "dphoi/errors.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace dphoi {

namespace {

constexpr char kMagic[8] = {'D', 'P', 'H', 'O', 'I', 'C', 'K', 'P'};

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  template <typename T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  const std::uint8_t* take(std::size_t n) {
    if (n > size_ - pos_) throw CheckpointError("checkpoint is truncated");
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  template <typename T>
  T uint() {
    const std::uint8_t* p = take(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(p[i]) << (8 * i));
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  [[nodiscard]] bool done() const { return pos_ == size_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

const TensorEntry* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

bool Checkpoint::has_tag(ComponentTag tag) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const TensorEntry& t) { return t.tag == tag; });
}

ModelConfig Checkpoint::config() const {
  if (!metadata.contains("config")) throw CheckpointError("checkpoint metadata carries no model config");
  try {
    return metadata.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint model config is malformed: ") + e.what());
  }
}

Checkpoint snapshot(const Model& model, std::uint64_t step, const nlohmann::json& extra) {
  Checkpoint c;
  c.metadata = extra.is_object() ? extra : nlohmann::json::object();
  c.metadata["config"] = model.config();
  c.metadata["step"] = step;
  c.metadata["seed"] = model.config().seed;
  for (const auto& p : model.params().entries()) c.tensors.push_back({p.name, p.tag, p.var.value()});
  return c;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.uint<std::uint32_t>(c.version);
  const std::string meta = c.metadata.dump();
  w.uint<std::uint64_t>(meta.size());
  w.bytes(meta.data(), meta.size());
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(t.tag));
    w.uint<std::uint64_t>(static_cast<std::uint64_t>(t.value.rows()));
    w.uint<std::uint64_t>(static_cast<std::uint64_t>(t.value.cols()));
    for (Index i = 0; i < t.value.size(); ++i) w.f64(t.value.data()[i]);
  }
  auto& buf = w.buffer();
  const std::uint32_t crc = crc_of(buf.data(), buf.size());
  w.uint<std::uint32_t>(crc);
  return std::move(buf);
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < sizeof kMagic + 4 + 4) throw CheckpointError("checkpoint is truncated");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw CheckpointError("not a checkpoint file (bad magic)");
  const std::size_t body = bytes.size() - 4;
  Reader trailer(bytes.data() + body, 4);
  if (trailer.uint<std::uint32_t>() != crc_of(bytes.data(), body)) {
    throw CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)");
  }

  Reader r(bytes.data(), body);
  r.take(sizeof kMagic);
  Checkpoint c;
  c.version = r.uint<std::uint32_t>();
  if (c.version != Checkpoint::kVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(c.version) + " is not supported (expected " +
                          std::to_string(Checkpoint::kVersion) + ")");
  }
  const auto meta_len = r.uint<std::uint64_t>();
  const auto* meta = r.take(meta_len);
  try {
    c.metadata = nlohmann::json::parse(meta, meta + meta_len);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata is malformed: ") + e.what());
  }
  const auto count = r.uint<std::uint32_t>();
  std::set<std::string> names;
  for (std::uint32_t k = 0; k < count; ++k) {
    TensorEntry t;
    const auto name_len = r.uint<std::uint32_t>();
    const auto* name = r.take(name_len);
    t.name.assign(reinterpret_cast<const char*>(name), name_len);
    const auto tag = r.uint<std::uint8_t>();
    if (tag > static_cast<std::uint8_t>(ComponentTag::dn)) throw CheckpointError("unknown component tag in checkpoint");
    t.tag = static_cast<ComponentTag>(tag);
    const auto rows = r.uint<std::uint64_t>();
    const auto cols = r.uint<std::uint64_t>();
    if (cols != 0 && rows > (body / 8) / cols) throw CheckpointError("checkpoint tensor '" + t.name + "' is truncated");
    t.value.resize(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = r.f64();
    if (!names.insert(t.name).second) throw CheckpointError("duplicate tensor '" + t.name + "' in checkpoint");
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes in checkpoint");
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(checkpoint);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

void load_into(Model& model, const Checkpoint& checkpoint) {
  auto& entries = model.params().entries();
  if (entries.size() != checkpoint.tensors.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(checkpoint.tensors.size()) + " tensors, model has " +
                          std::to_string(entries.size()));
  }
  // Validate everything first so a failure leaves the model untouched.
  for (const auto& p : entries) {
    const TensorEntry* t = checkpoint.find(p.name);
    if (t == nullptr) throw CheckpointError("checkpoint lacks parameter '" + p.name + "'");
    if (t->tag != p.tag) throw CheckpointError("component tag mismatch for '" + p.name + "'");
    if (t->value.rows() != p.var.rows() || t->value.cols() != p.var.cols()) {
      throw CheckpointError("shape mismatch for '" + p.name + "'");
    }
  }
  for (auto& p : entries) p.var.mutable_value() = checkpoint.find(p.name)->value;
}

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& checkpoint) {
  auto model = std::make_unique<Model>(checkpoint.config());
  load_into(*model, checkpoint);
  return model;
}

std::string_view to_string(InitStrategy s) {
  switch (s) {
    case InitStrategy::backbone_encoder: return "backbone_encoder";
    case InitStrategy::plus_detection_decoder: return "plus_detection_decoder";
    case InitStrategy::full: return "full";
  }
  return "full";
}

InitStrategy init_strategy_from_string(std::string_view name) {
  if (name == "backbone_encoder" || name == "a") return InitStrategy::backbone_encoder;
  if (name == "plus_detection_decoder" || name == "b") return InitStrategy::plus_detection_decoder;
  if (name == "full" || name == "c") return InitStrategy::full;
  throw ConfigError("unknown init strategy '" + std::string(name) +
                    "' (expected backbone_encoder, plus_detection_decoder or full)");
}

namespace {

bool feeds_interaction(std::string_view head_name) {
  return head_name.starts_with("heads.verb") || head_name.starts_with("heads.caption");
}

constexpr std::string_view kInteraction = "interaction_decoder.";
constexpr std::string_view kDetection = "detection_decoder.";

}  // namespace

bool strategy_copies(InitStrategy strategy, ComponentTag tag, std::string_view name) {
  const int level = static_cast<int>(strategy);  // 0 = a, 1 = b, 2 = c
  switch (tag) {
    case ComponentTag::backbone:
    case ComponentTag::encoder: return true;
    case ComponentTag::detection_decoder: return level >= 1;
    case ComponentTag::interaction_decoder: return level >= 2;
    case ComponentTag::heads: return feeds_interaction(name) ? level >= 2 : level >= 1;
    case ComponentTag::dn: return false;
  }
  return false;
}

std::map<ComponentTag, std::size_t> TransferReport::copied_per_tag() const {
  std::map<ComponentTag, std::size_t> out;
  for (const auto& c : copied) ++out[c.tag];
  return out;
}

void to_json(nlohmann::json& j, const TransferReport& r) {
  j = nlohmann::json::object();
  j["strategy"] = std::string(to_string(r.strategy));
  j["decoder_fallback"] = r.decoder_fallback;
  auto& copied = j["copied"] = nlohmann::json::array();
  for (const auto& c : r.copied) {
    copied.push_back({{"target", c.target}, {"source", c.source}, {"tag", std::string(to_string(c.tag))},
                      {"fallback", c.fallback}});
  }
  auto& skipped = j["skipped"] = nlohmann::json::array();
  for (const auto& s : r.skipped) skipped.push_back({{"target", s.target}, {"reason", s.reason}});
  j["shape_mismatches"] = r.shape_mismatches;
  nlohmann::json per_tag = nlohmann::json::object();
  for (const auto& [tag, n] : r.copied_per_tag()) per_tag[std::string(to_string(tag))] = n;
  j["copied_per_tag"] = per_tag;
}

TransferResult apply_init_strategy(const Checkpoint& source, const Checkpoint& target, InitStrategy strategy) {
  const bool any_overlap = std::any_of(target.tensors.begin(), target.tensors.end(),
                                       [&](const TensorEntry& t) { return source.find(t.name) != nullptr; });
  if (!any_overlap) throw CheckpointError("source and target checkpoints share no parameter names");

  const bool fallback_possible = strategy == InitStrategy::full && target.has_tag(ComponentTag::interaction_decoder) &&
                                 !source.has_tag(ComponentTag::interaction_decoder);

  TransferResult result;
  result.initialized = target;
  TransferReport& report = result.report;
  report.strategy = strategy;

  for (auto& t : result.initialized.tensors) {
    if (t.tag == ComponentTag::dn) {
      report.skipped.push_back({t.name, "denoising parameters are never transferred"});
      continue;
    }
    if (!strategy_copies(strategy, t.tag, t.name)) {
      report.skipped.push_back({t.name, "component not included in strategy " + std::string(to_string(strategy))});
      continue;
    }
    std::string source_name = t.name;
    bool fallback = false;
    if (fallback_possible && t.tag == ComponentTag::interaction_decoder && t.name.starts_with(kInteraction)) {
      source_name = std::string(kDetection) + t.name.substr(kInteraction.size());
      fallback = true;
    }
    const TensorEntry* s = source.find(source_name);
    if (s == nullptr) {
      report.skipped.push_back({t.name, "no parameter '" + source_name + "' in source"});
      continue;
    }
    if (s->value.rows() != t.value.rows() || s->value.cols() != t.value.cols()) {
      report.shape_mismatches.push_back(t.name);
      continue;
    }
    t.value = s->value;
    report.copied.push_back({t.name, source_name, t.tag, fallback});
    report.decoder_fallback = report.decoder_fallback || fallback;
  }
  return result;
}

std::map<ComponentTag, double> diff_checkpoints(const Checkpoint& a, const Checkpoint& b) {
  if (a.tensors.size() != b.tensors.size()) throw CheckpointError("checkpoint layouts differ in tensor count");
  std::map<ComponentTag, double> out;
  for (const auto& ta : a.tensors) {
    const TensorEntry* tb = b.find(ta.name);
    if (tb == nullptr) throw CheckpointError("checkpoint layouts differ: '" + ta.name + "' missing");
    if (tb->tag != ta.tag) throw CheckpointError("checkpoint layouts differ: tag of '" + ta.name + "'");
    if (tb->value.rows() != ta.value.rows() || tb->value.cols() != ta.value.cols()) {
      throw CheckpointError("checkpoint layouts differ: shape of '" + ta.name + "'");
    }
    double& d = out[ta.tag];
    if (ta.value.size() > 0) d = std::max(d, (ta.value - tb->value).cwiseAbs().maxCoeff());
  }
  return out;
}

}  // namespace dphoi
