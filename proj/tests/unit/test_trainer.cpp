#include "doctest.h"
#include "test_util.hpp"

#include "dphoi/errors.hpp"
#include "dphoi/trainer.hpp"

#include <cmath>
#include <set>

using namespace dphoi;

namespace {

RunConfig tiny_run() {
  RunConfig c;
  c.model = testutil::tiny_config();
  c.synthetic.detection_images = 6;
  c.synthetic.action_images = 6;
  c.plan = BatchPlan::parse("1:1", 4);
  c.total_steps = 20;
  c.optimizer.lr = 3e-3;
  c.optimizer.grad_clip = 5.0;
  c.bank_clusters = 2;
  c.bank_per_cluster = 2;
  return c;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("run config validation lists every problem") {
  RunConfig c = tiny_run();
  c.total_steps = 0;
  c.optimizer.lr = -1.0;
  c.focal.alpha = 1.5;
  c.num_frames = 0;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("total_steps") != std::string::npos);
    CHECK(msg.find("optimizer.lr") != std::string::npos);
    CHECK(msg.find("focal.alpha") != std::string::npos);
    CHECK(msg.find("num_frames") != std::string::npos);
  }
  CHECK_NOTHROW(tiny_run().validate());
}

TEST_CASE("run config json round trip and hash") {
  RunConfig c = tiny_run();
  c.early_plan = BatchPlan::parse("1:0", 4);
  c.action_start_step = 5;
  c.fusion = FusionMode::avg;
  const nlohmann::json j = c;
  const RunConfig back = j.get<RunConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.hash() == c.hash());
  RunConfig other = c;
  other.seed = 1;
  CHECK(other.hash() != c.hash());
  other = c;
  other.output_dir = "elsewhere";
  CHECK(other.hash() == c.hash());

  nlohmann::json bad = j;
  bad["learning_rate"] = 1.0;
  CHECK_THROWS_AS(bad.get<RunConfig>(), ConfigError);
}

TEST_CASE("checked-in configs load") {
  for (const char* name : {"overfit.json", "desk.json"}) {
    const RunConfig c = load_run_config(std::filesystem::path(DPHOI_CONFIGS) / name);
    CHECK_NOTHROW(c.validate());
  }
}

TEST_CASE("lr schedule decays once at the configured fraction") {
  ParamStore store;
  OptimizerConfig oc;
  oc.lr = 1e-3;
  AdamW opt(store, oc, 100);
  CHECK(opt.lr_at(0) == 1e-3);
  CHECK(opt.lr_at(89) == 1e-3);
  CHECK(opt.lr_at(90) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(opt.lr_at(99) == doctest::Approx(1e-4).epsilon(1e-12));
  AdamW odd(store, oc, 15);  // floor(13.5)
  CHECK(odd.lr_at(12) == 1e-3);
  CHECK(odd.lr_at(13) < 1e-3);
}

TEST_CASE("first AdamW step matches the closed form and clips the global norm") {
  ParamStore store;
  ag::Var p = store.add("p", ComponentTag::heads, Matrix::Constant(1, 2, 1.0));
  OptimizerConfig oc;
  oc.lr = 0.1;
  oc.weight_decay = 0.01;
  oc.grad_clip = 1.0;
  AdamW opt(store, oc, 10);
  // grad (3, 4), norm 5, clipped to (0.6, 0.8)
  const ag::Var loss = ag::sum(ag::mul(p, ag::constant((Matrix(1, 2) << 3.0, 4.0).finished())));
  ag::backward(loss);
  CHECK(opt.step(0) == doctest::Approx(5.0));
  // bias-corrected first step moves each entry by lr * g / (|g| + eps)
  for (Index k = 0; k < 2; ++k) {
    const double g = k == 0 ? 0.6 : 0.8;
    const double want = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * g / (g + oc.eps);
    CHECK(p.value()(0, k) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("synthetic manifest splits verbs between action datasets") {
  RunConfig c = tiny_run();
  c.synthetic.action_videos = 3;
  c.synthetic.captions = 4;
  const Manifest m = synthetic_manifest(c);
  std::set<int> seen;
  std::size_t action_sets = 0;
  for (const auto& d : m.datasets) {
    if (d.kind == DatasetKind::action_image || d.kind == DatasetKind::action_video) {
      ++action_sets;
      for (int v : d.verb_class_ids) CHECK(seen.insert(v).second);
    }
  }
  CHECK(action_sets == 2);
  CHECK(seen.size() == static_cast<std::size_t>(c.model.num_verb_classes));
  CHECK(m.records.size() == 6 + 6 + 3 + 4);
  CHECK_NOTHROW(validate_datasets(m.datasets, c.model.num_verb_classes));
}

TEST_CASE("a short run lowers the loss and keeps its accounting") {
  const RunConfig c = tiny_run();
  Trainer t(c, synthetic_manifest(c));
  double first = 0.0, last = 0.0;
  for (std::uint64_t s = 0; s < c.total_steps; ++s) {
    const StepResult r = t.step();
    CHECK(r.step == s);
    CHECK(r.counts.items == 4);
    CHECK(r.counts.processed() + r.counts.skipped() == r.counts.items);
    CHECK(std::isfinite(r.report.total));
    if (s == 0) first = r.report.total;
    last = r.report.total;
  }
  CHECK(last < first);
  CHECK(t.current_step() == c.total_steps);
}

TEST_CASE("identical configs give identical step records") {
  RunConfig c = tiny_run();
  c.total_steps = 5;
  c.dn.enabled = true;
  c.model.dn_enabled = true;
  auto run = [&] {
    Trainer t(c, synthetic_manifest(c));
    std::string out;
    for (int i = 0; i < 5; ++i) out += step_log_record(t.step(), c).dump() + "\n";
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("step records carry the fusion mode and config hash") {
  RunConfig c = tiny_run();
  c.fusion = FusionMode::avg;
  Trainer t(c, synthetic_manifest(c));
  const auto j = step_log_record(t.step(), c);
  CHECK(j.at("fusion") == "avg");
  CHECK(j.at("config_hash") == c.hash());
  for (const char* k : {"L_b", "L_g", "L_c", "L_a", "L_s", "total", "lr", "grad_norm"}) CHECK(j.contains(k));
}

TEST_CASE("empty RPQ sets skip action samples with a zero verb loss") {
  RunConfig c = tiny_run();
  c.model.rpq_threshold = 0.999999;
  Trainer t(c, synthetic_manifest(c));
  const StepResult r = t.step();
  CHECK(r.counts.action == 2);
  CHECK(r.counts.skipped_action == 2);
  CHECK(r.report.terms.action == 0.0);
}

TEST_CASE("early plan holds back action data") {
  RunConfig c = tiny_run();
  c.early_plan = BatchPlan::parse("1:0", 4);
  c.action_start_step = 2;
  Trainer t(c, synthetic_manifest(c));
  CHECK(t.step().counts.action == 0);
  CHECK(t.step().counts.action == 0);
  CHECK(t.step().counts.action == 2);
}

TEST_CASE("non-finite input stops the step") {
  const RunConfig c = tiny_run();
  Manifest m = synthetic_manifest(c);
  for (auto& r : m.records) r.frames.front().pixels[0] = std::nan("");
  Trainer t(c, std::move(m));
  CHECK_THROWS_AS(t.step(), NonFiniteError);
}

TEST_CASE("training-set evaluation counts every sample") {
  const RunConfig c = tiny_run();
  const Manifest m = synthetic_manifest(c);
  Trainer t(c, m);
  const TrainingMetrics tm = evaluate_training_set(t.model(), m, c.branch_options());
  CHECK(tm.action_samples == 6);
  CHECK(tm.detection_pairs > 0);
  CHECK(tm.class_accuracy() >= 0.0);
  CHECK(tm.class_accuracy() <= 1.0);
  CHECK(tm.mean_iou >= 0.0);
  CHECK(tm.mean_iou <= 1.0);
}

}
