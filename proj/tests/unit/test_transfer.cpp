#include "doctest.h"
#include "test_util.hpp"

#include "dphoi/errors.hpp"
#include "dphoi/transfer.hpp"

#include <fstream>
#include <set>

using namespace dphoi;

namespace {

ModelConfig source_config() {
  ModelConfig c = testutil::tiny_config();
  c.seed = 100;
  return c;
}

ModelConfig target_config() {
  ModelConfig c = testutil::tiny_config();
  c.seed = 200;
  c.dn_enabled = true;
  return c;
}

std::set<ComponentTag> copied_tags(const TransferReport& r) {
  std::set<ComponentTag> out;
  for (const auto& c : r.copied) out.insert(c.tag);
  return out;
}

}  // namespace

TEST_SUITE("transfer") {

TEST_CASE("checkpoint file round trip is bit exact") {
  const Model model(source_config());
  const Checkpoint ck = snapshot(model, 17, {{"note", "x"}});
  const auto dir = testutil::scratch_dir("ckpt");
  save_checkpoint(ck, dir / "a.ckpt");
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  CHECK(back.metadata.at("step") == 17);
  CHECK(back.metadata.at("note") == "x");
  CHECK(back.config() == model.config());
  REQUIRE(back.tensors.size() == ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    CHECK(back.tensors[i].name == ck.tensors[i].name);
    CHECK(back.tensors[i].tag == ck.tensors[i].tag);
    CHECK(back.tensors[i].value == ck.tensors[i].value);
  }
  CHECK(serialize_checkpoint(back) == serialize_checkpoint(ck));
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto bytes = serialize_checkpoint(snapshot(Model(source_config())));
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x40;
  CHECK_THROWS_AS(deserialize_checkpoint(flipped), CheckpointError);
  const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + 20);
  CHECK_THROWS_AS(deserialize_checkpoint(truncated), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), CheckpointError);
}

TEST_CASE("a model rebuilt from its checkpoint computes the same outputs") {
  std::mt19937_64 rng(81);
  const Model model(source_config());
  const auto copy = model_from_checkpoint(snapshot(model));
  const Image img = testutil::random_image(16, 32, rng);
  const auto a = model.embed_and_encode(img);
  const auto b = copy->embed_and_encode(img);
  CHECK(a.features.value() == b.features.value());
}

TEST_CASE("load_into checks the whole layout before writing") {
  Model model(source_config());
  Checkpoint ck = snapshot(Model(target_config()));
  ck.tensors.back().value = Matrix::Zero(1, 1);
  const Matrix before = model.params().entries().front().var.value();
  CHECK_THROWS_AS(load_into(model, ck), CheckpointError);
  CHECK(model.params().entries().front().var.value() == before);
}

TEST_CASE("each strategy copies exactly its component set") {
  const Checkpoint src = snapshot(Model(source_config()));
  const Checkpoint tgt = snapshot(Model(target_config()));
  using T = ComponentTag;
  const std::map<InitStrategy, std::set<ComponentTag>> expect{
      {InitStrategy::backbone_encoder, {T::backbone, T::encoder}},
      {InitStrategy::plus_detection_decoder, {T::backbone, T::encoder, T::detection_decoder, T::heads}},
      {InitStrategy::full, {T::backbone, T::encoder, T::detection_decoder, T::interaction_decoder, T::heads}},
  };
  for (const auto& [strategy, tags] : expect) {
    const TransferResult r = apply_init_strategy(src, tgt, strategy);
    CHECK(copied_tags(r.report) == tags);
    CHECK(r.report.covered() == tgt.tensors.size());
    CHECK(r.report.shape_mismatches.empty());
    CHECK_FALSE(r.report.decoder_fallback);
    for (const auto& t : tgt.tensors) {
      const bool copy = strategy_copies(strategy, t.tag, t.name);
      const Matrix& now = r.initialized.find(t.name)->value;
      CHECK_MESSAGE(now == (copy ? src.find(t.name)->value : t.value), t.name);
    }
    for (const auto& c : r.report.copied) {
      CHECK(c.tag != T::dn);
      if (strategy == InitStrategy::plus_detection_decoder && c.tag == T::heads) {
        CHECK_FALSE(c.target.starts_with("heads.verb"));
        CHECK_FALSE(c.target.starts_with("heads.caption"));
      }
    }
  }
}

TEST_CASE("backbone+encoder transfer leaves decoders at target init and reproduces encoder features") {
  std::mt19937_64 rng(82);
  const Model src_model(source_config());
  const Checkpoint tgt = snapshot(Model(target_config()));
  const TransferResult r = apply_init_strategy(snapshot(src_model), tgt, InitStrategy::backbone_encoder);
  const auto diff = diff_checkpoints(r.initialized, tgt);
  CHECK(diff.at(ComponentTag::detection_decoder) == 0.0);
  CHECK(diff.at(ComponentTag::interaction_decoder) == 0.0);
  CHECK(diff.at(ComponentTag::heads) == 0.0);
  CHECK(diff.at(ComponentTag::encoder) > 0.0);
  const auto moved = model_from_checkpoint(r.initialized);
  const Image img = testutil::random_image(16, 32, rng);
  CHECK(moved->embed_and_encode(img).features.value() == src_model.embed_and_encode(img).features.value());
}

TEST_CASE("missing interaction decoder falls back to the detection decoder") {
  Checkpoint src = snapshot(Model(source_config()));
  std::erase_if(src.tensors, [](const TensorEntry& t) { return t.tag == ComponentTag::interaction_decoder; });
  const Checkpoint tgt = snapshot(Model(target_config()));
  const TransferResult r = apply_init_strategy(src, tgt, InitStrategy::full);
  CHECK(r.report.decoder_fallback);
  std::size_t fallbacks = 0;
  for (const auto& c : r.report.copied) {
    if (c.tag == ComponentTag::interaction_decoder) {
      CHECK(c.fallback);
      CHECK(c.source == "detection_decoder" + c.target.substr(std::string("interaction_decoder").size()));
      CHECK(r.initialized.find(c.target)->value == src.find(c.source)->value);
      ++fallbacks;
    }
  }
  CHECK(fallbacks > 0);
  CHECK(nlohmann::json(r.report).at("decoder_fallback") == true);
}

TEST_CASE("shape mismatches and disjoint layouts") {
  ModelConfig other = target_config();
  other.num_object_classes = 5;
  other.num_verb_classes = 7;
  const Checkpoint src = snapshot(Model(source_config()));
  const TransferResult r = apply_init_strategy(src, snapshot(Model(other)), InitStrategy::full);
  std::set<std::string> mismatched(r.report.shape_mismatches.begin(), r.report.shape_mismatches.end());
  CHECK(mismatched.contains("heads.object.weight"));
  CHECK(mismatched.contains("heads.verb.weight"));
  CHECK(r.report.covered() == r.initialized.tensors.size());

  Checkpoint alien;
  alien.tensors.push_back({"something.else", ComponentTag::backbone, Matrix::Zero(1, 1)});
  CHECK_THROWS_AS(apply_init_strategy(src, alien, InitStrategy::full), CheckpointError);
  CHECK_THROWS_AS(diff_checkpoints(src, alien), CheckpointError);
}

TEST_CASE("strategy names") {
  CHECK(init_strategy_from_string("a") == InitStrategy::backbone_encoder);
  CHECK(init_strategy_from_string("plus_detection_decoder") == InitStrategy::plus_detection_decoder);
  CHECK(init_strategy_from_string("c") == InitStrategy::full);
  CHECK_THROWS(init_strategy_from_string("everything"));
}

}
