#include "doctest.h"
#include "test_util.hpp"

#include "dphoi/errors.hpp"
#include "dphoi/model.hpp"

using namespace dphoi;

TEST_SUITE("model") {

TEST_CASE("config validation lists every problem") {
  ModelConfig c = testutil::tiny_config();
  c.embed_dim = 7;  // not divisible by heads
  c.rpq_threshold = 1.0;
  c.num_queries = 0;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("num_heads") != std::string::npos);
    CHECK(msg.find("rpq_threshold") != std::string::npos);
    CHECK(msg.find("num_queries") != std::string::npos);
  }
  CHECK_NOTHROW(testutil::tiny_config().validate());
}

TEST_CASE("config JSON round trip") {
  ModelConfig c = testutil::tiny_config();
  c.detach_rpq = true;
  c.seed = 42;
  const ModelConfig back = nlohmann::json(c).get<ModelConfig>();
  CHECK(back == c);
}

TEST_CASE("forward shapes") {
  std::mt19937_64 rng(31);
  const Model model(testutil::tiny_config());
  const Image img = testutil::random_image(16, 32, rng);
  const EncoderOutput enc = model.embed_and_encode(img);
  CHECK(enc.num_tokens() == 8);
  CHECK(enc.grid_height == 2);
  CHECK(enc.grid_width == 4);

  const DecoderState det = model.detection_decode(enc, model.learnable_queries(), model.initial_embeddings(3));
  const Predictions p = model.predict_heads(det, HeadKind::detection);
  CHECK(p.boxes.rows() == 3);
  CHECK(p.boxes.cols() == 4);
  CHECK(p.object_logits.cols() == 4);  // 3 classes + no-object
  CHECK((p.boxes.value().array() > 0).all());
  CHECK((p.boxes.value().array() < 1).all());

  const ag::Var qp = ag::slice_rows(det.output, 0, 2);
  const DecoderState inter = model.interaction_decode(enc, qp, model.initial_embeddings(2));
  const Predictions v = model.predict_heads(inter, HeadKind::verb);
  CHECK(v.verb_logits.rows() == 2);
  CHECK(v.verb_logits.cols() == 10);
}

TEST_CASE("heads refuse the wrong decoder output") {
  std::mt19937_64 rng(32);
  const Model model(testutil::tiny_config());
  const EncoderOutput enc = model.embed_and_encode(testutil::random_image(16, 32, rng));
  const DecoderState det = model.detection_decode(enc, model.learnable_queries(), model.initial_embeddings(3));
  CHECK_THROWS_AS((void)model.predict_heads(det, HeadKind::verb), StateError);
  const DecoderState inter = model.interaction_decode(enc, ag::slice_rows(det.output, 0, 1), model.initial_embeddings(1));
  CHECK_THROWS_AS((void)model.predict_heads(inter, HeadKind::detection), StateError);
  CHECK_THROWS_AS((void)model.interaction_decode(enc, ag::Var(Matrix(0, 8)), model.initial_embeddings(0)), EmptyRpqError);
}

TEST_CASE("cross-attention rows are distributions over tokens") {
  std::mt19937_64 rng(33);
  ModelConfig cfg = testutil::tiny_config();
  cfg.num_decoder_layers = 2;
  const Model model(cfg);
  const EncoderOutput enc = model.embed_and_encode(testutil::random_image(16, 32, rng));
  const DecoderState det = model.detection_decode(enc, model.learnable_queries(), model.initial_embeddings(3));
  REQUIRE(det.attention.size() == 2);
  for (const auto& layer : det.attention) {
    REQUIRE(layer.size() == 2);
    for (const Matrix& w : layer) {
      CHECK(w.rows() == 3);
      CHECK(w.cols() == 8);
      for (Index r = 0; r < w.rows(); ++r) CHECK(w.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("same seed, same parameters; different seed, different parameters") {
  ModelConfig c = testutil::tiny_config();
  const Model a(c), b(c);
  c.seed = 1;
  const Model d(c);
  REQUIRE(a.params().entries().size() == b.params().entries().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.params().entries().size(); ++i) {
    CHECK(a.params().entries()[i].var.value() == b.params().entries()[i].var.value());
    if (a.params().entries()[i].var.value() != d.params().entries()[i].var.value()) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("every parameter carries the tag its name implies") {
  const Model model(testutil::tiny_config());
  for (const auto& p : model.params().entries()) {
    const std::string prefix = p.name.substr(0, p.name.find('.'));
    const std::string tag(to_string(p.tag));
    CHECK_MESSAGE(prefix == tag, p.name);
  }
  ModelConfig no_dn = testutil::tiny_config();
  no_dn.dn_enabled = false;
  const Model plain(no_dn);
  for (const auto& p : plain.params().entries()) CHECK(p.tag != ComponentTag::dn);
}

TEST_CASE("sine positional encoding") {
  const Matrix pe = sine_positional_encoding(2, 4, 8);
  CHECK(pe.rows() == 8);
  CHECK(pe.cols() == 8);
  CHECK((pe.array().abs() <= 1.0).all());
  // distinct positions, distinct codes
  for (Index i = 0; i < 8; ++i) {
    for (Index j = i + 1; j < 8; ++j) CHECK((pe.row(i) - pe.row(j)).norm() > 1e-6);
  }
}

TEST_CASE("the verb loss gradient w.r.t. the person queries matches finite differences") {
  std::mt19937_64 rng(34);
  const Model model(testutil::tiny_config());
  const EncoderOutput enc = model.embed_and_encode(testutil::random_image(16, 32, rng));
  ag::Var qp(testutil::random_matrix(2, 8, rng), true);
  const Matrix w = testutil::random_matrix(2, 10, rng);
  auto loss = [&] {
    const DecoderState s = model.interaction_decode(enc, qp, model.initial_embeddings(2));
    return ag::sum(ag::mul(ag::sigmoid(model.predict_heads(s, HeadKind::verb).verb_logits), ag::constant(w)));
  };
  CHECK(testutil::fd_check(qp, loss) < 1e-4);
}

}
