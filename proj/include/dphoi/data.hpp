#pragma once

// Records, dataset declarations, synthetic generators, manifest ingestion
// and the mixed-batch composer.

#include "dphoi/autograd.hpp"
#include "dphoi/caption.hpp"
#include "dphoi/image.hpp"

#include "json.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace dphoi {

enum class DatasetKind { detection, action_image, action_video, caption };
std::string_view to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(std::string_view name);

// Batch-plan groups: both action kinds share one slot.
enum class KindGroup { detection, action, caption };
KindGroup group_of(DatasetKind kind);
std::string_view to_string(KindGroup group);

struct DatasetSpec {
  std::string name;
  DatasetKind kind = DatasetKind::detection;
  std::vector<int> verb_class_ids;  // global ids, action kinds only
  int person_class_id = 0;
  double sampling_weight = 1.0;

  [[nodiscard]] std::vector<bool> verb_mask(int num_verb_classes) const;
  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

void to_json(nlohmann::json& j, const DatasetSpec& d);
void from_json(const nlohmann::json& j, DatasetSpec& d);

// Throws ConfigError listing every problem: duplicate names, ids outside
// [0, num_verb_classes), verb ids owned by no action dataset (only checked
// when `require_full_cover`), non-positive weights.
void validate_datasets(const std::vector<DatasetSpec>& specs, int num_verb_classes,
                       bool require_full_cover = true);

struct Record {
  std::string id;
  std::string dataset;
  DatasetKind kind = DatasetKind::detection;
  std::vector<Image> frames;               // one for image kinds
  std::vector<std::string> media;          // source files when loaded from disk, per frame
  Matrix boxes = Matrix(0, 4);             // detection, cxcywh in [0, 1]
  std::vector<int> labels;                 // detection
  std::vector<int> verbs;                  // action, global verb ids
  std::string caption;                     // caption
  std::vector<HOITriplet> triplets;        // caption, parsed

  [[nodiscard]] const Image& image() const { return frames.front(); }
};

// ---- synthetic data ----

struct SyntheticCanvas {
  int height = 32;
  int width = 32;
};

// Fill color of an object class; the person class gets a fixed pure red.
std::array<double, 3> class_color(int object_class, int person_class);
// Glyph color painted in the middle of a person whose action is `verb`.
std::array<double, 3> verb_color(int verb);

struct SyntheticDetectionOptions {
  std::string dataset = "synthetic-det";
  int num_object_classes = 4;
  int person_class_id = 0;
  int min_boxes = 1;
  int max_boxes = 3;
  SyntheticCanvas canvas;
};

std::vector<Record> generate_synthetic_detection(int n_images, const SyntheticDetectionOptions& options,
                                                 std::uint64_t seed);

struct SyntheticActionOptions {
  std::string dataset = "synthetic-act";
  DatasetKind kind = DatasetKind::action_image;
  std::vector<int> verb_classes;  // the dataset's declared global ids
  int num_object_classes = 4;
  int person_class_id = 0;
  int num_frames = 4;             // video kind
  bool zero_persons = false;      // emit person-free samples (empty RPQ path)
  SyntheticCanvas canvas;
};

// One person per sample whose central glyph color encodes a single verb
// drawn from `verb_classes`; videos move the person a little per frame and
// share one label.
std::vector<Record> generate_synthetic_actions(int n_samples, const SyntheticActionOptions& options,
                                               std::uint64_t seed);

struct SyntheticCaptionOptions {
  std::string dataset = "synthetic-cap";
  int num_object_classes = 4;
  int person_class_id = 0;
  SyntheticCanvas canvas;
};

// "a man rides a horse" style captions with a matching person/object layout;
// triplets are filled by the caption parser.
std::vector<Record> generate_synthetic_captions(int n_samples, const SyntheticCaptionOptions& options,
                                                std::uint64_t seed);

// ---- manifests ----

struct ManifestIssue {
  std::size_t line = 0;
  std::string message;
};

struct Manifest {
  static constexpr int kVersion = 1;
  std::vector<DatasetSpec> datasets;
  std::vector<Record> records;
  std::map<std::string, std::size_t> filtered;  // reason -> count
  std::vector<ManifestIssue> issues;            // only populated in lenient mode

  [[nodiscard]] const DatasetSpec& dataset(std::string_view name) const;
};

struct IngestOptions {
  bool lenient = false;  // skip and report bad lines instead of failing
  // Optional resize of every frame (nearest neighbour); off by default.
  std::optional<SyntheticCanvas> resize;
};

// First line: {"format": "dphoi-manifest", "version": 1, "datasets": [...]}.
// Then one record per line. Relative media paths resolve against the
// manifest's directory. In strict mode any bad line throws DataError listing
// every bad line.
Manifest ingest_manifest(const std::filesystem::path& path, const IngestOptions& options = {});
Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir,
                        const IngestOptions& options = {});

// Normalized form; pixels stay as media references when a record came from
// files, otherwise they are written inline.
void write_manifest(const Manifest& manifest, std::ostream& out);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

Image read_ppm(const std::filesystem::path& path);
void write_ppm(const Image& image, const std::filesystem::path& path);
Image resize_nearest(const Image& image, int height, int width);

// ---- batch composition ----

struct BatchPlan {
  int batch_size = 8;
  // Integer ratio detection : action : caption. Zero drops the group.
  std::map<KindGroup, int> ratio;

  // "2:1:1" or "1:1" (detection:action[:caption]).
  static BatchPlan parse(std::string_view ratio_text, int batch_size);
  [[nodiscard]] std::string ratio_text() const;
  [[nodiscard]] int ratio_sum() const;
  friend bool operator==(const BatchPlan&, const BatchPlan&) = default;
};

void to_json(nlohmann::json& j, const BatchPlan& p);
void from_json(const nlohmann::json& j, BatchPlan& p);

// Largest-remainder apportionment of `total` slots over integer weights,
// given how many each bucket already received: the cumulative counts after
// this call stay within one slot of the exact proportional share.
std::vector<int> apportion(int total, const std::vector<double>& weights,
                           const std::vector<long long>& already, long long total_so_far);

struct BatchItem {
  std::size_t dataset = 0;  // index into the stream's specs
  std::size_t record = 0;   // index into that dataset's records
};

struct Batch {
  std::uint64_t step = 0;
  std::vector<BatchItem> items;
  BatchPlan plan;
};

// Infinite, seeded stream of mixed batches. Each dataset is visited in a
// fresh shuffled order per pass. `schedule` switches plans at given steps
// (e.g. action data joins late); the first entry must start at step 0.
class BatchStream {
 public:
  BatchStream(std::vector<DatasetSpec> specs, std::vector<std::vector<const Record*>> records,
              std::vector<std::pair<std::uint64_t, BatchPlan>> schedule, std::uint64_t seed);

  Batch next();
  [[nodiscard]] const std::vector<DatasetSpec>& specs() const { return specs_; }
  [[nodiscard]] const Record& record(const BatchItem& item) const {
    return *records_[item.dataset][item.record];
  }
  [[nodiscard]] const BatchPlan& plan_at(std::uint64_t step) const;

 private:
  std::size_t draw(std::size_t dataset);

  std::vector<DatasetSpec> specs_;
  std::vector<std::vector<const Record*>> records_;
  std::vector<std::pair<std::uint64_t, BatchPlan>> schedule_;
  std::mt19937_64 rng_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<std::size_t>> order_;
  std::vector<std::size_t> cursor_;
  std::map<KindGroup, long long> group_given_;
  std::vector<long long> dataset_given_;
  long long slots_given_ = 0;
  std::size_t active_plan_ = 0;
};

// Groups `manifest.records` by dataset (in declaration order) and builds a
// stream. Throws ConfigError when a planned group has no records.
BatchStream make_batch_stream(const Manifest& manifest,
                              std::vector<std::pair<std::uint64_t, BatchPlan>> schedule,
                              std::uint64_t seed);

// N_f sorted frame indices drawn at random; shorter videos are sampled with
// replacement.
std::vector<int> sample_frame_indices(int num_frames, int n_f, std::mt19937_64& rng);

}  // namespace dphoi
