#include "doctest.h"
#include "test_util.hpp"

#include "dphoi/caption.hpp"
#include "dphoi/errors.hpp"

#include "json.hpp"

#include <fstream>
#include <map>
#include <set>

using namespace dphoi;

namespace {

using Expected = std::map<std::string, std::vector<std::array<std::string, 3>>>;

Expected read_expected(const std::string& name) {
  Expected out;
  std::ifstream in(testutil::fixture(name));
  std::string line;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    auto& v = out[j.at("id").get<std::string>()];
    for (const auto& t : j.at("triplets")) v.push_back({t[0].get<std::string>(), t[1].get<std::string>(), t[2].get<std::string>()});
  }
  return out;
}

// Parses a caption fixture and compares against its expectations; returns
// the number of mismatching captions and counts rule violations.
std::size_t check_corpus(const std::string& captions, const std::string& expected, std::size_t& violations) {
  const Expected want = read_expected(expected);
  std::size_t bad = 0;
  for (const auto& c : read_caption_lines(testutil::fixture(captions))) {
    std::vector<std::array<std::string, 3>> got;
    for (const auto& t : parse_caption(c.text, c.id)) {
      got.push_back({t.human, t.verb, t.object});
      if (!is_person_noun(t.human)) ++violations;
      if (verb_lemma(t.verb.substr(0, t.verb.find(' '))).empty()) ++violations;
      if (t.object.empty() || t.source_caption_id != c.id) ++violations;
    }
    if (got != want.at(c.id)) {
      ++bad;
      MESSAGE("mismatch on " << c.id << ": " << c.text);
    }
  }
  return bad;
}

}  // namespace

TEST_SUITE("caption") {

TEST_CASE("filtering examples") {
  const auto ok = parse_caption("a man drives a car", "c");
  REQUIRE(ok.size() == 1);
  CHECK(ok[0] == HOITriplet{"man", "drive", "car", "c"});
  CHECK(parse_caption("car runs on the road").empty());
  CHECK(parse_caption("a man on the road").empty());
  std::size_t violations = 0;
  CHECK(check_corpus("filter_examples.jsonl", "filter_examples_expected.jsonl", violations) == 0);
  CHECK(violations == 0);
}

TEST_CASE("200-caption corpus parses to its labels") {
  std::size_t violations = 0;
  CHECK(check_corpus("captions_200.jsonl", "captions_200_expected.jsonl", violations) == 0);
  CHECK(violations == 0);
}

TEST_CASE("parser patterns") {
  auto one = [](std::string_view text) {
    const auto t = parse_caption(text);
    return t.size() == 1 ? t[0].human + "|" + t[0].verb + "|" + t[0].object : std::to_string(t.size());
  };
  CHECK(one("A Woman is Riding a Horse.") == "woman|ride|horse");
  CHECK(one("the surfer rode a large wave") == "surfer|ride|wave");
  CHECK(one("a man sits on a bench") == "man|sit on|bench");
  CHECK(one("there are people watching the game") == "people|watch|game");
  CHECK(one("a woman in a red dress holds a baby") == "woman|hold|baby");
  CHECK(one("a man sleeps.") == "0");
  CHECK(one("a dog chases a cat") == "0");
  CHECK(parse_caption("a boy and a girl fly a kite").size() == 2);
  CHECK(parse_caption("a man throws a frisbee and catches a ball").size() == 2);
  CHECK(parse_caption("a man rides a bike. a woman holds a cup").size() == 2);
  CHECK(parse_caption("").empty());
}

TEST_CASE("prompt template and normalization") {
  CHECK(template_prompt({"Man", "ride", "horse", ""}) == "a photo of man ride horse");
  CHECK(normalize_text("  A   Photo\tOF ") == "a photo of");
}

TEST_CASE("hashing encoder") {
  const HashingTextEncoder enc(32, 5);
  const Matrix e = enc.encode({"a photo of man ride horse", "a photo of the man ride a horse", "a photo of girl hold cup"});
  for (Index i = 0; i < 3; ++i) CHECK(e.row(i).norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((e.row(0) - e.row(1)).norm() < 1e-12);
  CHECK((e.row(0) - e.row(2)).norm() > 0.1);
  CHECK(HashingTextEncoder(32, 5).encode({"a photo of man ride horse"}) == e.topRows(1));
  CHECK(HashingTextEncoder(32, 6).encode({"a photo of man ride horse"}) != e.topRows(1));
  CHECK_THROWS_AS(embed_texts({}, enc), DataError);
}

TEST_CASE("k-means recovers separated groups") {
  std::mt19937_64 rng(61);
  std::normal_distribution<double> noise(0.0, 0.01);
  Matrix pts(60, 2);
  for (Index i = 0; i < 60; ++i) {
    const double cx = (i % 3) * 10.0;
    pts.row(i) << cx + noise(rng), noise(rng);
  }
  const KMeansResult r = kmeans(pts, 3, 50, 1);
  for (Index i = 0; i < 60; ++i) CHECK(r.assignment[static_cast<std::size_t>(i)] == r.assignment[static_cast<std::size_t>(i % 3)]);
  std::set<int> used(r.assignment.begin(), r.assignment.end());
  CHECK(used.size() == 3);
  // more clusters than points collapses to one per point
  CHECK(kmeans(pts.topRows(2), 5, 10, 1).centroids.rows() == 2);
}

TEST_CASE("negative bank sampling") {
  std::vector<std::string> ids, prompts;
  for (int i = 0; i < 40; ++i) {
    ids.push_back("t" + std::to_string(i));
    prompts.push_back("a photo of man verb" + std::to_string(i % 20) + " thing" + std::to_string(i));
  }
  const HashingTextEncoder enc(16, 0);
  NegativeBank bank = build_negative_bank(ids, prompts, embed_texts(prompts, enc), 6, 3, 9);
  CHECK(bank.num_clusters == 6);
  std::vector<std::size_t> sizes(6, 0);
  for (int c : bank.cluster_of) ++sizes[static_cast<std::size_t>(c)];
  for (int c = 0; c < 6; ++c) {
    CHECK(sizes[static_cast<std::size_t>(c)] > 0);
    CHECK(bank.samples[static_cast<std::size_t>(c)].size() == std::min<std::size_t>(3, sizes[static_cast<std::size_t>(c)]));
    for (Index i : bank.samples[static_cast<std::size_t>(c)]) CHECK(bank.cluster_of[static_cast<std::size_t>(i)] == c);
  }
  for (Index p = 0; p < 40; ++p) {
    for (Index n : negatives_for(p, bank)) CHECK(n != p);
  }
  CHECK_THROWS_AS(negatives_for("nope", bank), DataError);

  const auto before = bank.samples;
  const std::size_t count = bank.sample_count();
  bank.resample(10);
  CHECK(bank.sample_count() == count);
  CHECK(bank.samples != before);
}

TEST_CASE("bank file round trip") {
  std::vector<std::string> ids{"a#0", "b#0", "c#0"};
  std::vector<std::string> prompts{"a photo of man ride horse", "a photo of girl hold cup", "a photo of boy kick ball"};
  const NegativeBank bank = build_negative_bank(ids, prompts, embed_texts(prompts, HashingTextEncoder(8, 0)), 2, 1, 3);
  const auto dir = testutil::scratch_dir("bank");
  save_negative_bank(bank, dir / "bank.json");
  const NegativeBank back = load_negative_bank(dir / "bank.json");
  CHECK(back.triplet_ids == bank.triplet_ids);
  CHECK(back.prompts == bank.prompts);
  CHECK(back.cluster_of == bank.cluster_of);
  CHECK(back.samples == bank.samples);
  CHECK(back.embeddings.isApprox(bank.embeddings, 1e-15));
  CHECK(back.index_of("b#0") == 1);
  std::ofstream(dir / "bad.json") << R"({"format": "something-else"})";
  CHECK_THROWS_AS(load_negative_bank(dir / "bad.json"), DataError);
}

TEST_CASE("caption and triplet line files") {
  const auto dir = testutil::scratch_dir("caption_io");
  std::ofstream(dir / "empty.jsonl").close();
  CHECK(read_caption_lines(dir / "empty.jsonl").empty());
  std::ofstream(dir / "bad.jsonl") << "{\"id\": \"x\"}\n";
  CHECK_THROWS_AS(read_caption_lines(dir / "bad.jsonl"), DataError);

  const std::vector<HOITriplet> ts{{"man", "ride", "horse", "c1"}, {"girl", "sit on", "bench", "c1"}};
  write_triplet_lines(ts, dir / "t.jsonl");
  CHECK(read_triplet_lines(dir / "t.jsonl") == ts);
  std::ifstream in(dir / "t.jsonl");
  std::string first;
  std::getline(in, first);
  const auto j = nlohmann::json::parse(first);
  CHECK(j.at("id") == "c1#0");
  CHECK(j.at("prompt") == "a photo of man ride horse");
  CHECK(triplet_id("c1", 1) == "c1#1");
}

}
