#pragma once

// Caption -> <human, verb, object> triplets -> prompt -> text embedding ->
// offline clustering -> negative bank for the caption alignment loss.

#include "dphoi/autograd.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace dphoi {

struct HOITriplet {
  std::string human;
  std::string verb;    // lemma, plus a particle when present ("sit on")
  std::string object;
  std::string source_caption_id;

  friend bool operator==(const HOITriplet&, const HOITriplet&) = default;
};

void to_json(nlohmann::json& j, const HOITriplet& t);
void from_json(const nlohmann::json& j, HOITriplet& t);

// Lexicon queries used by the parser and by its filtering rules.
bool is_person_noun(std::string_view word);
// Lemma of a known verb form ("drives" -> "drive"), empty when unknown.
std::string verb_lemma(std::string_view word);

class CaptionParser {
 public:
  virtual ~CaptionParser() = default;
  [[nodiscard]] virtual std::vector<HOITriplet> parse(std::string_view caption,
                                                      std::string_view caption_id) const = 0;
};

// Shallow pattern parser over a built-in lexicon:
//   [there is|are] NP(subject) [PP]* [is|are] VERB [particle] NP(object)
//   (and VERB [particle] NP)*
// Subjects outside the person lexicon and relations that are not verbs are
// dropped. Unparseable captions give an empty result.
class RuleBasedCaptionParser final : public CaptionParser {
 public:
  [[nodiscard]] std::vector<HOITriplet> parse(std::string_view caption,
                                              std::string_view caption_id) const override;
};

std::vector<HOITriplet> parse_caption(std::string_view caption, std::string_view caption_id = "");

// Lowercase, whitespace collapsed, trimmed.
std::string normalize_text(std::string_view text);
// "a photo of {human} {verb} {object}", normalized.
std::string template_prompt(const HOITriplet& t);

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  [[nodiscard]] virtual int dim() const = 0;
  // One L2-normalized row per prompt.
  [[nodiscard]] virtual Matrix encode(const std::vector<std::string>& prompts) const = 0;
};

// Deterministic bag-of-content-words embedder: every word maps to a fixed
// pseudo-random direction derived from its hash; a prompt embeds to the
// normalized sum of its words' directions. Template and function words are
// ignored.
class HashingTextEncoder final : public TextEncoder {
 public:
  explicit HashingTextEncoder(int dim = 64, std::uint64_t seed = 0);
  [[nodiscard]] int dim() const override { return dim_; }
  [[nodiscard]] Matrix encode(const std::vector<std::string>& prompts) const override;

 private:
  int dim_;
  std::uint64_t seed_;
};

// Wraps encoder failures in DataError naming the prompt; checks row norms.
Matrix embed_texts(const std::vector<std::string>& prompts, const TextEncoder& encoder);

struct KMeansResult {
  std::vector<int> assignment;  // cluster per point
  Matrix centroids;
  int iterations = 0;
};

// Lloyd iterations with k-means++ seeding. Every cluster is kept non-empty
// when there are at least k points; k is capped at the number of points.
KMeansResult kmeans(const Matrix& points, int k, int max_iterations, std::uint64_t seed);

struct NegativeBank {
  static constexpr int kFormatVersion = 1;

  std::vector<std::string> triplet_ids;
  std::vector<std::string> prompts;
  Matrix embeddings;               // [num_triplets x proj_dim], normalized
  std::vector<int> cluster_of;     // per triplet
  int num_clusters = 0;
  int per_cluster = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<Index>> samples;  // per cluster, sorted triplet indices

  [[nodiscard]] Index index_of(std::string_view triplet_id) const;  // -1 when unknown
  [[nodiscard]] std::size_t sample_count() const;
  // Redraw per-cluster samples (per-batch negative mode).
  void resample(std::uint64_t new_seed);
};

NegativeBank build_negative_bank(std::vector<std::string> triplet_ids, std::vector<std::string> prompts,
                                 const Matrix& embeddings, int k = 100, int per_cluster = 10,
                                 std::uint64_t seed = 0, int kmeans_iterations = 50);

// Sampled triplets minus the positive and any triplet with the identical
// prompt. Throws DataError for an unknown positive.
std::vector<Index> negatives_for(Index positive, const NegativeBank& bank);
std::vector<Index> negatives_for(std::string_view positive_id, const NegativeBank& bank);

void save_negative_bank(const NegativeBank& bank, const std::filesystem::path& path);
NegativeBank load_negative_bank(const std::filesystem::path& path);

// Line-delimited caption records {"id", "text"} -> triplet records.
struct CaptionLine {
  std::string id;
  std::string text;
};
std::vector<CaptionLine> read_caption_lines(const std::filesystem::path& path);
void write_triplet_lines(const std::vector<HOITriplet>& triplets, const std::filesystem::path& path);
std::vector<HOITriplet> read_triplet_lines(const std::filesystem::path& path);
// Stable id for the k-th triplet of a caption.
std::string triplet_id(std::string_view caption_id, std::size_t k);

}  // namespace dphoi
