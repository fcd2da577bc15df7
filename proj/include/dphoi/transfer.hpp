#pragma once

// Checkpoint files and downstream initialization from a pre-trained
// checkpoint.
//
// File layout (all integers little-endian):
//   magic "DPHOICKP" | u32 version | u64 n | n bytes of metadata JSON |
//   u32 tensor count | per tensor: u32 name length, name, u8 tag,
//   u64 rows, u64 cols, rows*cols f64 row-major | u32 crc32 of all
//   preceding bytes

#include "dphoi/model.hpp"
#include "dphoi/nn.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace dphoi {

struct TensorEntry {
  std::string name;
  ComponentTag tag = ComponentTag::backbone;
  Matrix value;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  nlohmann::json metadata = nlohmann::json::object();  // "config", "step", "seed", ...
  std::vector<TensorEntry> tensors;

  [[nodiscard]] const TensorEntry* find(std::string_view name) const;
  [[nodiscard]] bool has_tag(ComponentTag tag) const;
  // ModelConfig stored under "config"; throws CheckpointError when absent.
  [[nodiscard]] ModelConfig config() const;
};

Checkpoint snapshot(const Model& model, std::uint64_t step = 0,
                    const nlohmann::json& extra_metadata = nlohmann::json::object());

// Writes to a sibling temporary file and renames it into place.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
// The whole file is verified before anything is returned. Throws
// CheckpointError on bad magic, version mismatch, checksum mismatch or
// truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

// Copies every tensor into the model; names, tags and shapes must match
// exactly.
void load_into(Model& model, const Checkpoint& checkpoint);
// Builds a model from the stored config and loads the tensors.
std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& checkpoint);

enum class InitStrategy { backbone_encoder, plus_detection_decoder, full };
std::string_view to_string(InitStrategy s);
InitStrategy init_strategy_from_string(std::string_view name);

struct CopiedParameter {
  std::string target;
  std::string source;
  ComponentTag tag;
  bool fallback = false;  // interaction decoder filled from the detection decoder
};

struct SkippedParameter {
  std::string target;
  std::string reason;
};

struct TransferReport {
  InitStrategy strategy = InitStrategy::backbone_encoder;
  std::vector<CopiedParameter> copied;
  std::vector<SkippedParameter> skipped;
  std::vector<std::string> shape_mismatches;
  bool decoder_fallback = false;

  [[nodiscard]] std::map<ComponentTag, std::size_t> copied_per_tag() const;
  [[nodiscard]] std::size_t covered() const { return copied.size() + skipped.size() + shape_mismatches.size(); }
};

void to_json(nlohmann::json& j, const TransferReport& r);

struct TransferResult {
  Checkpoint initialized;
  TransferReport report;
};

// Tags a strategy copies. Heads are split by which decoder feeds them: box
// and object heads travel with the detection decoder, verb and caption heads
// with the interaction decoder. Denoising tensors never transfer.
bool strategy_copies(InitStrategy strategy, ComponentTag tag, std::string_view name);

// `target` supplies the layout and the values of everything not copied.
// When the strategy includes the interaction decoder and the source has none,
// its detection-decoder tensors are copied into it. Throws CheckpointError
// when no parameter name is shared at all.
TransferResult apply_init_strategy(const Checkpoint& source, const Checkpoint& target, InitStrategy strategy);

// Max |a - b| per component tag. Throws CheckpointError unless names, tags
// and shapes agree.
std::map<ComponentTag, double> diff_checkpoints(const Checkpoint& a, const Checkpoint& b);

}  // namespace dphoi
