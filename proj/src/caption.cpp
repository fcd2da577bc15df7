#include "dphoi/caption.hpp"

#include "dphoi/errors.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>
#include <optional>
#include <unordered_set>

namespace dphoi {

namespace {

// lemma, third person, progressive, past
constexpr std::string_view kVerbTable = R"(
ride rides riding rode
drive drives driving drove
hold holds holding held
eat eats eating ate
drink drinks drinking drank
throw throws throwing threw
catch catches catching caught
kick kicks kicking kicked
hit hits hitting hit
carry carries carrying carried
push pushes pushing pushed
pull pulls pulling pulled
play plays playing played
read reads reading read
watch watches watching watched
wear wears wearing wore
walk walks walking walked
sit sits sitting sat
stand stands standing stood
lie lies lying lay
jump jumps jumping jumped
run runs running ran
swim swims swimming swam
cut cuts cutting cut
wash washes washing washed
fly flies flying flew
feed feeds feeding fed
pet pets petting petted
hug hugs hugging hugged
kiss kisses kissing kissed
touch touches touching touched
open opens opening opened
climb climbs climbing climbed
paint paints painting painted
write writes writing wrote
talk talks talking talked
look looks looking looked
use uses using used
take takes taking took
brush brushes brushing brushed
repair repairs repairing repaired
fix fixes fixing fixed
lift lifts lifting lifted
serve serves serving served
sell sells selling sold
buy buys buying bought
pour pours pouring poured
sail sails sailing sailed
row rows rowing rowed
board boards boarding boarded
swing swings swinging swung
chase chases chasing chased
grab grabs grabbing grabbed
wave waves waving waved
point points pointing pointed
lean leans leaning leaned
sleep sleeps sleeping slept
dig digs digging dug
blow blows blowing blew
pick picks picking picked
lick licks licking licked
herd herds herding herded
skate skates skating skated
ski skis skiing skied
surf surfs surfing surfed
teach teaches teaching taught
help helps helping helped
fill fills filling filled
load loads loading loaded
tie ties tying tied
stir stirs stirring stirred
slice slices slicing sliced
clean cleans cleaning cleaned
inspect inspects inspecting inspected
)";

constexpr std::string_view kPersonNouns =
    "man men woman women person people persons boy boys girl girls child children kid kids "
    "player players guy guys lady ladies gentleman gentlemen baby babies toddler toddlers "
    "teenager teenagers teen teens adult adults skier skiers surfer surfers skateboarder "
    "skateboarders snowboarder snowboarders rider riders biker bikers cyclist cyclists worker "
    "workers chef chefs student students teacher teachers doctor doctors officer officers "
    "policeman policemen soldier soldiers athlete athletes dancer dancers musician musicians "
    "couple friends mother father mom dad son daughter brother sister farmer farmers tourist "
    "tourists vendor vendors fisherman fishermen pitcher batter catcher tennis-player";

constexpr std::string_view kDeterminers =
    "a an the this that these those his her their its my our your some one two three four five "
    "several many few another other each every both";

constexpr std::string_view kPrepositions =
    "on in at with to into onto over under through across along down up off near behind beside "
    "by from of around inside outside toward towards against for about upon";

constexpr std::string_view kConjunctions = "and or but while as who that which where when ,";
constexpr std::string_view kCopulas = "is are was were be being been";

std::unordered_set<std::string> word_set(std::string_view words) {
  std::unordered_set<std::string> out;
  std::istringstream in{std::string(words)};
  std::string w;
  while (in >> w) out.insert(w);
  return out;
}

struct Lexicon {
  std::unordered_map<std::string, std::string> verb_forms;  // form -> lemma
  std::unordered_set<std::string> persons = word_set(kPersonNouns);
  std::unordered_set<std::string> determiners = word_set(kDeterminers);
  std::unordered_set<std::string> prepositions = word_set(kPrepositions);
  std::unordered_set<std::string> conjunctions = word_set(kConjunctions);
  std::unordered_set<std::string> copulas = word_set(kCopulas);

  Lexicon() {
    std::istringstream lines{std::string(kVerbTable)};
    std::string line;
    while (std::getline(lines, line)) {
      std::istringstream fields(line);
      std::string lemma, form;
      if (!(fields >> lemma)) continue;
      verb_forms[lemma] = lemma;
      while (fields >> form) verb_forms.emplace(form, lemma);
    }
  }

  [[nodiscard]] bool is_verb(const std::string& w) const { return verb_forms.contains(w); }
  [[nodiscard]] bool stops_noun_phrase(const std::string& w) const {
    return is_verb(w) || prepositions.contains(w) || conjunctions.contains(w) || copulas.contains(w);
  }
};

const Lexicon& lexicon() {
  static const Lexicon lex;
  return lex;
}

// Lowercased word tokens; sentence punctuation becomes "." and commas ",".
std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) tokens.push_back(std::move(cur));
    cur.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isalnum(c) || raw == '-' || raw == '\'') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      if (raw == ',') tokens.emplace_back(",");
      if (raw == '.' || raw == '!' || raw == '?' || raw == ';' || raw == ':') tokens.emplace_back(".");
    }
  }
  flush();
  return tokens;
}

class ClauseParser {
 public:
  ClauseParser(const std::vector<std::string>& tokens, std::string_view caption_id)
      : t_(tokens), id_(caption_id) {}

  std::vector<HOITriplet> run() {
    std::vector<HOITriplet> out;
    if (at("there")) {
      ++pos_;
      while (lex_.copulas.contains(peek())) ++pos_;
    }
    std::vector<std::string> subjects;
    auto first = noun_phrase();
    if (!first) return out;
    subjects.push_back(*first);
    while (at("and")) {
      const std::size_t save = pos_;
      ++pos_;
      auto more = noun_phrase();
      if (!more) {
        pos_ = save;
        break;
      }
      subjects.push_back(*more);
    }
    skip_prepositional_phrases();

    while (true) {
      while (lex_.copulas.contains(peek())) ++pos_;
      if (!lex_.is_verb(peek())) break;
      std::string verb = lex_.verb_forms.at(peek());
      ++pos_;
      if (lex_.prepositions.contains(peek())) {
        verb += " " + peek();
        ++pos_;
      }
      auto object = noun_phrase(true);
      if (!object) break;
      for (const auto& s : subjects) {
        if (lex_.persons.contains(s)) out.push_back({s, verb, *object, std::string(id_)});
      }
      skip_prepositional_phrases();
      // Coordinated predicate: "... and holds a rope".
      if ((at("and") || at(",")) && continues_with_verb(pos_ + 1)) {
        ++pos_;
        continue;
      }
      break;
    }
    return out;
  }

 private:
  [[nodiscard]] std::string peek(std::size_t ahead = 0) const {
    return pos_ + ahead < t_.size() ? t_[pos_ + ahead] : std::string();
  }
  [[nodiscard]] bool at(std::string_view w) const { return peek() == w; }

  [[nodiscard]] bool continues_with_verb(std::size_t i) const {
    while (i < t_.size() && lex_.copulas.contains(t_[i])) ++i;
    return i < t_.size() && lex_.is_verb(t_[i]);
  }

  // Determiners, then words up to the next stopper; the head is the last word.
  std::optional<std::string> noun_phrase(bool object_position = false) {
    const std::size_t save = pos_;
    while (lex_.determiners.contains(peek())) ++pos_;
    const std::string first = peek();
    if (first.empty() || first == "." || lex_.conjunctions.contains(first) ||
        lex_.prepositions.contains(first) || lex_.copulas.contains(first)) {
      pos_ = save;
      return std::nullopt;
    }
    std::string head = first;
    ++pos_;
    while (!peek().empty() && peek() != "." && (!lex_.stops_noun_phrase(peek()) || (object_position && noun_reading()))) {
      head = peek();
      ++pos_;
    }
    return head;
  }

  // "rides a large wave": in object position, a verb form after a modifier
  // that closes the phrase is the head noun.
  [[nodiscard]] bool noun_reading() const {
    if (!lex_.is_verb(peek())) return false;
    const std::string next = peek(1);
    return next.empty() || next == "." || lex_.prepositions.contains(next);
  }

  void skip_prepositional_phrases() {
    while (lex_.prepositions.contains(peek())) {
      const std::size_t save = pos_;
      ++pos_;
      if (!noun_phrase()) {
        pos_ = save;
        return;
      }
    }
  }

  const Lexicon& lex_ = lexicon();
  const std::vector<std::string>& t_;
  std::string_view id_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL ^ seed;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

void to_json(nlohmann::json& j, const HOITriplet& t) {
  j = nlohmann::json{{"caption_id", t.source_caption_id}, {"human", t.human}, {"verb", t.verb}, {"object", t.object}};
}

void from_json(const nlohmann::json& j, HOITriplet& t) {
  t.source_caption_id = j.value("caption_id", std::string());
  t.human = j.at("human").get<std::string>();
  t.verb = j.at("verb").get<std::string>();
  t.object = j.at("object").get<std::string>();
}

bool is_person_noun(std::string_view word) { return lexicon().persons.contains(std::string(word)); }

std::string verb_lemma(std::string_view word) {
  const auto& forms = lexicon().verb_forms;
  const auto it = forms.find(std::string(word));
  return it == forms.end() ? std::string() : it->second;
}

std::vector<HOITriplet> RuleBasedCaptionParser::parse(std::string_view caption,
                                                      std::string_view caption_id) const {
  const std::vector<std::string> tokens = tokenize(caption);
  std::vector<HOITriplet> out;
  std::vector<std::string> clause;
  auto flush = [&] {
    if (!clause.empty()) {
      auto found = ClauseParser(clause, caption_id).run();
      out.insert(out.end(), found.begin(), found.end());
    }
    clause.clear();
  };
  for (const auto& tok : tokens) {
    if (tok == ".") {
      flush();
    } else {
      clause.push_back(tok);
    }
  }
  flush();
  return out;
}

std::vector<HOITriplet> parse_caption(std::string_view caption, std::string_view caption_id) {
  static const RuleBasedCaptionParser parser;
  return parser.parse(caption, caption_id);
}

std::string normalize_text(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

std::string template_prompt(const HOITriplet& t) {
  return normalize_text("a photo of " + t.human + " " + t.verb + " " + t.object);
}

HashingTextEncoder::HashingTextEncoder(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  if (dim <= 0) throw ConfigError("text encoder dimension must be positive");
}

Matrix HashingTextEncoder::encode(const std::vector<std::string>& prompts) const {
  static const std::unordered_set<std::string> ignored = [] {
    auto s = word_set(kDeterminers);
    for (const auto& w : word_set(kPrepositions)) s.insert(w);
    s.insert("photo");
    return s;
  }();
  Matrix out = Matrix::Zero(static_cast<Index>(prompts.size()), dim_);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    std::vector<std::string> words;
    for (auto& w : tokenize(prompts[i])) {
      if (w != "." && w != "," && !ignored.contains(w)) words.push_back(std::move(w));
    }
    if (words.empty()) words.push_back(normalize_text(prompts[i]));
    for (const auto& w : words) {
      std::uint64_t state = fnv1a(w, seed_);
      for (int d = 0; d < dim_; ++d) {
        // uniform in [-1, 1)
        const double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
        out(static_cast<Index>(i), d) += 2.0 * u - 1.0;
      }
    }
    out.row(static_cast<Index>(i)).normalize();
  }
  return out;
}

Matrix embed_texts(const std::vector<std::string>& prompts, const TextEncoder& encoder) {
  if (prompts.empty()) throw DataError("embed_texts: no prompts");
  Matrix out;
  try {
    out = encoder.encode(prompts);
  } catch (const std::exception& e) {
    throw DataError(std::string("text encoder failed: ") + e.what());
  }
  if (out.rows() != static_cast<Index>(prompts.size()) || out.cols() != encoder.dim()) {
    throw DataError("text encoder returned the wrong shape");
  }
  for (Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (!std::isfinite(n) || n == 0.0) {
      throw DataError("text encoder produced a degenerate embedding for prompt '" +
                      prompts[static_cast<std::size_t>(i)] + "'");
    }
    out.row(i) /= n;
  }
  return out;
}

KMeansResult kmeans(const Matrix& points, int k, int max_iterations, std::uint64_t seed) {
  const Index n = points.rows();
  if (n == 0) throw DataError("kmeans: no points");
  if (k <= 0) throw ConfigError("kmeans: k must be positive");
  k = static_cast<int>(std::min<Index>(k, n));
  std::mt19937_64 rng(seed);

  auto sq_dist = [&](Index i, const Matrix& centers, Index c) {
    return (points.row(i) - centers.row(c)).squaredNorm();
  };

  // k-means++ seeding.
  Matrix centers(k, points.cols());
  std::uniform_int_distribution<Index> pick(0, n - 1);
  centers.row(0) = points.row(pick(rng));
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Index i = 0; i < n; ++i) {
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], sq_dist(i, centers, c - 1));
      total += d2[static_cast<std::size_t>(i)];
    }
    Index chosen = pick(rng);
    if (total > 0.0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (Index i = 0; i < n; ++i) {
        r -= d2[static_cast<std::size_t>(i)];
        if (r <= 0.0) {
          chosen = i;
          break;
        }
      }
    }
    centers.row(c) = points.row(chosen);
  }

  KMeansResult result;
  result.assignment.assign(static_cast<std::size_t>(n), 0);
  for (int iter = 0; iter < max_iterations; ++iter) {
    bool changed = iter == 0;
    for (Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = sq_dist(i, centers, 0);
      for (int c = 1; c < k; ++c) {
        const double d = sq_dist(i, centers, c);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (result.assignment[static_cast<std::size_t>(i)] != best) changed = true;
      result.assignment[static_cast<std::size_t>(i)] = best;
    }

    // Refill empty clusters with the point farthest from its centroid among
    // clusters that can spare one.
    std::vector<Index> sizes(static_cast<std::size_t>(k), 0);
    for (int a : result.assignment) ++sizes[static_cast<std::size_t>(a)];
    for (int c = 0; c < k; ++c) {
      if (sizes[static_cast<std::size_t>(c)] > 0) continue;
      Index far = -1;
      double far_d = -1.0;
      for (Index i = 0; i < n; ++i) {
        const int a = result.assignment[static_cast<std::size_t>(i)];
        if (sizes[static_cast<std::size_t>(a)] < 2) continue;
        const double d = sq_dist(i, centers, a);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      if (far < 0) break;
      --sizes[static_cast<std::size_t>(result.assignment[static_cast<std::size_t>(far)])];
      result.assignment[static_cast<std::size_t>(far)] = c;
      sizes[static_cast<std::size_t>(c)] = 1;
      changed = true;
    }

    Matrix sums = Matrix::Zero(k, points.cols());
    for (Index i = 0; i < n; ++i) sums.row(result.assignment[static_cast<std::size_t>(i)]) += points.row(i);
    for (int c = 0; c < k; ++c) {
      if (sizes[static_cast<std::size_t>(c)] > 0) centers.row(c) = sums.row(c) / static_cast<double>(sizes[static_cast<std::size_t>(c)]);
    }
    result.iterations = iter + 1;
    if (!changed) break;
  }
  result.centroids = std::move(centers);
  return result;
}

Index NegativeBank::index_of(std::string_view triplet_id) const {
  for (std::size_t i = 0; i < triplet_ids.size(); ++i) {
    if (triplet_ids[i] == triplet_id) return static_cast<Index>(i);
  }
  return -1;
}

std::size_t NegativeBank::sample_count() const {
  std::size_t n = 0;
  for (const auto& s : samples) n += s.size();
  return n;
}

void NegativeBank::resample(std::uint64_t new_seed) {
  seed = new_seed;
  std::mt19937_64 rng(new_seed);
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(num_clusters));
  for (std::size_t i = 0; i < cluster_of.size(); ++i) {
    members[static_cast<std::size_t>(cluster_of[i])].push_back(static_cast<Index>(i));
  }
  samples.assign(static_cast<std::size_t>(num_clusters), {});
  for (int c = 0; c < num_clusters; ++c) {
    auto& m = members[static_cast<std::size_t>(c)];
    std::shuffle(m.begin(), m.end(), rng);
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(per_cluster), m.size());
    std::vector<Index> chosen(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(take));
    std::sort(chosen.begin(), chosen.end());
    samples[static_cast<std::size_t>(c)] = std::move(chosen);
  }
}

NegativeBank build_negative_bank(std::vector<std::string> triplet_ids, std::vector<std::string> prompts,
                                 const Matrix& embeddings, int k, int per_cluster, std::uint64_t seed,
                                 int kmeans_iterations) {
  if (triplet_ids.empty()) throw DataError("build_negative_bank: no triplets");
  if (triplet_ids.size() != prompts.size() || static_cast<Index>(triplet_ids.size()) != embeddings.rows()) {
    throw ShapeError("build_negative_bank: ids, prompts and embeddings disagree in length");
  }
  if (per_cluster <= 0) throw ConfigError("per_cluster must be positive");
  NegativeBank bank;
  bank.triplet_ids = std::move(triplet_ids);
  bank.prompts = std::move(prompts);
  bank.embeddings = embeddings;
  for (Index i = 0; i < bank.embeddings.rows(); ++i) bank.embeddings.row(i).normalize();
  const KMeansResult km = kmeans(bank.embeddings, k, kmeans_iterations, seed);
  bank.cluster_of = km.assignment;
  bank.num_clusters = static_cast<int>(km.centroids.rows());
  bank.per_cluster = per_cluster;
  bank.resample(seed);
  return bank;
}

std::vector<Index> negatives_for(Index positive, const NegativeBank& bank) {
  if (positive < 0 || positive >= static_cast<Index>(bank.triplet_ids.size())) {
    throw DataError("negatives_for: unknown positive triplet");
  }
  const std::string& prompt = bank.prompts[static_cast<std::size_t>(positive)];
  std::vector<Index> out;
  for (const auto& cluster : bank.samples) {
    for (Index i : cluster) {
      if (i != positive && bank.prompts[static_cast<std::size_t>(i)] != prompt) out.push_back(i);
    }
  }
  return out;
}

std::vector<Index> negatives_for(std::string_view positive_id, const NegativeBank& bank) {
  const Index i = bank.index_of(positive_id);
  if (i < 0) throw DataError("negatives_for: unknown triplet id '" + std::string(positive_id) + "'");
  return negatives_for(i, bank);
}

// Bank file: one JSON document.
//   {"format": "dphoi-negative-bank", "version": 1, "dim", "clusters",
//    "per_cluster", "seed",
//    "triplets": [{"id", "prompt", "cluster", "embedding": [...]}, ...],
//    "samples": [[triplet index, ...] per cluster]}
void save_negative_bank(const NegativeBank& bank, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "dphoi-negative-bank";
  j["version"] = NegativeBank::kFormatVersion;
  j["dim"] = bank.embeddings.cols();
  j["clusters"] = bank.num_clusters;
  j["per_cluster"] = bank.per_cluster;
  j["seed"] = bank.seed;
  auto& triplets = j["triplets"] = nlohmann::json::array();
  for (std::size_t i = 0; i < bank.triplet_ids.size(); ++i) {
    const auto row = bank.embeddings.row(static_cast<Index>(i));
    triplets.push_back({{"id", bank.triplet_ids[i]},
                        {"prompt", bank.prompts[i]},
                        {"cluster", bank.cluster_of[i]},
                        {"embedding", std::vector<double>(row.data(), row.data() + row.size())}});
  }
  j["samples"] = bank.samples;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write bank file " + path.string());
  out << j.dump() << '\n';
}

NegativeBank load_negative_bank(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read bank file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed bank file: " + std::string(e.what()));
  }
  if (j.value("format", std::string()) != "dphoi-negative-bank") throw DataError("not a negative bank file");
  if (j.value("version", 0) != NegativeBank::kFormatVersion) throw DataError("unsupported bank file version");
  NegativeBank bank;
  const auto dim = j.at("dim").get<Index>();
  bank.num_clusters = j.at("clusters").get<int>();
  bank.per_cluster = j.at("per_cluster").get<int>();
  bank.seed = j.at("seed").get<std::uint64_t>();
  const auto& triplets = j.at("triplets");
  bank.embeddings.resize(static_cast<Index>(triplets.size()), dim);
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    const auto& t = triplets[i];
    bank.triplet_ids.push_back(t.at("id").get<std::string>());
    bank.prompts.push_back(t.at("prompt").get<std::string>());
    bank.cluster_of.push_back(t.at("cluster").get<int>());
    const auto emb = t.at("embedding").get<std::vector<double>>();
    if (static_cast<Index>(emb.size()) != dim) throw DataError("bank embedding has the wrong width");
    for (Index d = 0; d < dim; ++d) bank.embeddings(static_cast<Index>(i), d) = emb[static_cast<std::size_t>(d)];
  }
  bank.samples = j.at("samples").get<std::vector<std::vector<Index>>>();
  return bank;
}

std::vector<CaptionLine> read_caption_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read caption file " + path.string());
  std::vector<CaptionLine> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (normalize_text(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::string triplet_id(std::string_view caption_id, std::size_t k) {
  return std::string(caption_id) + "#" + std::to_string(k);
}

void write_triplet_lines(const std::vector<HOITriplet>& triplets, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write triplet file " + path.string());
  std::unordered_map<std::string, std::size_t> counter;
  for (const auto& t : triplets) {
    nlohmann::json j = t;
    j["id"] = triplet_id(t.source_caption_id, counter[t.source_caption_id]++);
    j["prompt"] = template_prompt(t);
    out << j.dump() << '\n';
  }
}

std::vector<HOITriplet> read_triplet_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read triplet file " + path.string());
  std::vector<HOITriplet> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (normalize_text(line).empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<HOITriplet>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dphoi
