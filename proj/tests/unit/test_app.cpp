#include "doctest.h"
#include "test_util.hpp"

#include "dphoi/app.hpp"
#include "dphoi/errors.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace dphoi;

namespace {

RunConfig tiny_run(const std::filesystem::path& out) {
  RunConfig c;
  c.model = testutil::tiny_config();
  c.synthetic.detection_images = 4;
  c.synthetic.action_images = 4;
  c.plan = BatchPlan::parse("1:1", 4);
  c.total_steps = 12;
  c.checkpoint_every = 5;
  c.optimizer.lr = 3e-3;
  c.optimizer.grad_clip = 5.0;
  c.output_dir = out.string();
  return c;
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

void write_log(const std::filesystem::path& path, const std::vector<double>& totals) {
  std::ofstream out(path);
  for (std::size_t i = 0; i < totals.size(); ++i) {
    out << nlohmann::json{{"step", i}, {"total", totals[i]}, {"L_b", 0.5}, {"L_g", 0.25},
                          {"L_c", 1.0}, {"L_a", 0.0}, {"L_s", 0.0}}.dump() << "\n";
  }
}

}  // namespace

TEST_SUITE("app") {

TEST_CASE("output root applies to relative directories only") {
  ::setenv("DPHOI_OUTPUT_ROOT", "/tmp/root_x", 1);
  CHECK(resolve_output_dir("runs/a") == std::filesystem::path("/tmp/root_x/runs/a"));
  CHECK(resolve_output_dir("/abs/b") == std::filesystem::path("/abs/b"));
  ::unsetenv("DPHOI_OUTPUT_ROOT");
  CHECK(resolve_output_dir("runs/a") == std::filesystem::path("runs/a"));
}

TEST_CASE("smoothing is a trailing mean") {
  const std::vector<double> v{1, 2, 3, 4, 5, 6, 7};
  CHECK(smooth(v, 1) == v);
  const auto s = smooth(v, 3);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t lo = i >= 2 ? i - 2 : 0;
    double want = 0.0;
    for (std::size_t k = lo; k <= i; ++k) want += v[k];
    want /= static_cast<double>(i - lo + 1);
    CHECK(s[i] == doctest::Approx(want).epsilon(1e-12));
  }
  const auto flat = smooth(std::vector<double>(20, 2.5), 7);
  for (double x : flat) CHECK(x == doctest::Approx(2.5).epsilon(1e-15));
  CHECK_THROWS_AS(smooth(v, 0), ConfigError);
}

TEST_CASE("loss logs report every malformed line") {
  const auto dir = testutil::scratch_dir("losslog");
  std::ofstream(dir / "bad.jsonl") << R"({"step": 0, "total": 1, "L_b": 0, "L_g": 0, "L_c": 0, "L_a": 0, "L_s": 0})" << "\n"
                                   << "not json\n"
                                   << R"({"step": 2, "total": 1})" << "\n";
  try {
    (void)read_loss_log(dir / "bad.jsonl");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK(msg.find("line 3") != std::string::npos);
    CHECK(msg.find("line 1:") == std::string::npos);
  }
  std::ofstream(dir / "empty.jsonl").close();
  CHECK_THROWS_AS(read_loss_log(dir / "empty.jsonl"), DataError);
  CHECK_THROWS_AS(read_loss_log(dir / "missing.jsonl"), DataError);
}

TEST_CASE("window 1 table reproduces the log and the svg draws one line per run") {
  const auto dir = testutil::scratch_dir("losstable");
  std::filesystem::create_directories(dir / "r1");
  std::filesystem::create_directories(dir / "r2");
  const std::vector<double> a{3.0, 2.5, 2.125, 1.0 / 3.0};
  write_log(dir / "r1" / "loss_log.jsonl", a);
  write_log(dir / "r2" / "loss_log.jsonl", std::vector<double>(4, 1.5));
  const std::vector<LossSeries> runs{read_loss_log(dir / "r1" / "loss_log.jsonl"),
                                     read_loss_log(dir / "r2" / "loss_log.jsonl")};
  CHECK(runs[0].label == "r1");
  std::ostringstream table;
  write_loss_table(runs, 1, table);
  std::istringstream lines(table.str());
  std::string header, row;
  std::getline(lines, header);
  CHECK(header.starts_with("run,step,total"));
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::getline(lines, row);
    std::vector<std::string> cells;
    std::stringstream ss(row);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    CHECK(cells[0] == "r1");
    CHECK(std::stoull(cells[1]) == i);
    CHECK(std::stod(cells[2]) == a[i]);  // shortest round-trip text
  }
  const std::string svg = render_loss_svg(runs, 2);
  CHECK(count(svg, "<polyline") == 2);
  CHECK(svg.find("r1") != std::string::npos);
  CHECK(svg.find("r2") != std::string::npos);
}

TEST_CASE("pretrain writes its artifacts and reconciles counts") {
  const auto dir = testutil::scratch_dir("pretrain");
  const RunConfig c = tiny_run(dir / "run");
  const PretrainSummary s = run_pretrain(c);
  CHECK(s.steps == 12);
  CHECK(s.items == 12 * 4);
  CHECK(s.processed + s.skipped == s.items);
  CHECK(s.final_total < s.initial_total);
  for (const char* f : {"config.json", "manifest.jsonl", "loss_log.jsonl", "summary.json", "final.ckpt"}) {
    CHECK_MESSAGE(std::filesystem::exists(dir / "run" / f), f);
  }
  CHECK(std::filesystem::exists(dir / "run" / "checkpoints" / "step_0000005.ckpt"));
  CHECK(std::filesystem::exists(dir / "run" / "checkpoints" / "step_0000010.ckpt"));
  const LossSeries log = read_loss_log(s.log_path);
  CHECK(log.steps.size() == 12);
  CHECK(load_run_config(dir / "run" / "config.json").hash() == c.hash());
  const Manifest m = ingest_manifest(dir / "run" / "manifest.jsonl");
  CHECK(m.records.size() == 8);
}

TEST_CASE("probe output") {
  std::mt19937_64 rng(91);
  const Model model(testutil::tiny_config());
  const Image img = testutil::random_image(16, 32, rng);
  ProbeOptions opts;
  opts.threshold = 0.0;
  const auto j = probe_image(model, img, opts);
  CHECK(j.at("person_scores").size() == 3);
  CHECK(j.at("rpq").at("indices").size() == 3);
  CHECK(j.at("rpq").at("empty") == false);
  CHECK(j.at("fused").size() == 10);
  const auto& att = j.at("attention").at("interaction");
  REQUIRE(att.size() == 1);
  REQUIRE(att[0].size() == 2);
  for (const auto& head : att[0]) {
    for (const auto& row : head) {
      double sum = 0.0;
      for (const auto& v : row) sum += v.get<double>();
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  opts.threshold = 0.999999;
  opts.attention = false;
  const auto e = probe_image(model, img, opts);
  CHECK(e.at("rpq").at("empty") == true);
  CHECK(e.at("fused").empty());
}

}
