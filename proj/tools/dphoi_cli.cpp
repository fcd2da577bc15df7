// dphoi: pretrain, probe, plot, parse-captions, build-bank, transfer.
// Exit codes: 0 ok, 1 bad input data, 2 usage or internal error.

#include "dphoi/app.hpp"
#include "dphoi/caption.hpp"
#include "dphoi/errors.hpp"
#include "dphoi/transfer.hpp"

#include "CLI11.hpp"

#include <fstream>
#include <iostream>

namespace {

using namespace dphoi;

constexpr int kOk = 0;
constexpr int kDataError = 1;
constexpr int kInternalError = 2;

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << text;
}

struct PretrainArgs {
  std::string config;
  std::string output;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> steps;
  std::string fusion;
  bool quiet = false;
};

int cmd_pretrain(const PretrainArgs& a) {
  RunConfig config = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (!a.output.empty()) config.output_dir = a.output;
  if (a.seed) {
    config.seed = *a.seed;
    config.model.seed = *a.seed;
  }
  if (a.steps) config.total_steps = *a.steps;
  if (!a.fusion.empty()) config.fusion = fusion_mode_from_string(a.fusion);
  const PretrainSummary s = run_pretrain(config, a.quiet ? nullptr : &std::cerr);
  std::cout << nlohmann::json(s).dump(2) << '\n';
  return kOk;
}

struct ProbeArgs {
  std::string checkpoint;
  std::string manifest;
  std::string record;
  std::string image;
  std::optional<double> threshold;
  std::string fusion = "max";
  bool no_attention = false;
  std::string output;
};

int cmd_probe(const ProbeArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const auto model = model_from_checkpoint(ckpt);
  Image image;
  std::string source;
  if (!a.image.empty()) {
    image = read_ppm(a.image);
    source = a.image;
  } else {
    // Default to the manifest the run wrote next to its checkpoints.
    std::filesystem::path manifest = a.manifest;
    if (manifest.empty()) {
      auto dir = std::filesystem::path(a.checkpoint).parent_path();
      if (dir.filename() == "checkpoints") dir = dir.parent_path();
      manifest = dir / "manifest.jsonl";
    }
    const Manifest data = ingest_manifest(manifest);
    const Record* found = nullptr;
    for (const auto& r : data.records) {
      if (a.record.empty() || r.id == a.record) {
        found = &r;
        break;
      }
    }
    if (found == nullptr) throw DataError("record '" + a.record + "' not in " + manifest.string());
    image = found->image();
    source = found->id;
  }
  ProbeOptions opts;
  opts.threshold = a.threshold;
  opts.fusion = fusion_mode_from_string(a.fusion);
  opts.attention = !a.no_attention;
  nlohmann::json j = probe_image(*model, image, opts);
  j["sample"] = source;
  j["checkpoint_step"] = ckpt.metadata.value("step", 0);
  if (j["rpq"]["empty"].get<bool>()) std::cerr << "no person query above threshold " << j["threshold"] << '\n';
  write_text(a.output, j.dump() + "\n");
  return kOk;
}

struct PlotArgs {
  std::vector<std::string> logs;
  std::vector<std::string> labels;
  int window = 1;
  std::string column = "total";
  std::string svg = "loss.svg";
  std::string csv = "loss.csv";
};

int cmd_plot(const PlotArgs& a) {
  if (!a.labels.empty() && a.labels.size() != a.logs.size()) {
    throw ConfigError("--label must be given once per log");
  }
  std::vector<LossSeries> runs;
  for (std::size_t i = 0; i < a.logs.size(); ++i) {
    runs.push_back(read_loss_log(a.logs[i], a.labels.empty() ? "" : a.labels[i]));
  }
  write_text(a.svg, render_loss_svg(runs, a.window, a.column));
  std::ostringstream table;
  write_loss_table(runs, a.window, table);
  write_text(a.csv, table.str());
  return kOk;
}

int cmd_parse_captions(const std::string& input, const std::string& output) {
  const RuleBasedCaptionParser parser;
  std::vector<HOITriplet> all;
  std::size_t dropped = 0;
  const auto lines = read_caption_lines(input);
  for (const auto& c : lines) {
    auto t = parser.parse(c.text, c.id);
    if (t.empty()) ++dropped;
    all.insert(all.end(), t.begin(), t.end());
  }
  write_triplet_lines(all, output);
  std::cerr << lines.size() << " captions, " << all.size() << " triplets, " << dropped << " without a triplet\n";
  return kOk;
}

struct BankArgs {
  std::string triplets;
  std::string output;
  int clusters = 100;
  int per_cluster = 10;
  int dim = 64;
  std::uint64_t seed = 0;
};

int cmd_build_bank(const BankArgs& a) {
  const auto triplets = read_triplet_lines(a.triplets);
  std::vector<std::string> ids, prompts;
  std::map<std::string, std::size_t> per_caption;
  for (const auto& t : triplets) {
    ids.push_back(triplet_id(t.source_caption_id, per_caption[t.source_caption_id]++));
    prompts.push_back(template_prompt(t));
  }
  const HashingTextEncoder encoder(a.dim, a.seed);
  const NegativeBank bank =
      build_negative_bank(ids, prompts, embed_texts(prompts, encoder), a.clusters, a.per_cluster, a.seed);
  save_negative_bank(bank, a.output);
  std::cerr << ids.size() << " triplets, " << bank.num_clusters << " clusters, " << bank.sample_count()
            << " negatives\n";
  return kOk;
}

struct TransferArgs {
  std::string source;
  std::string target;
  std::string target_config;
  std::string strategy;
  std::string output;
  std::string report;
};

int cmd_transfer(const TransferArgs& a) {
  const Checkpoint source = load_checkpoint(a.source);
  Checkpoint target;
  if (!a.target.empty()) {
    target = load_checkpoint(a.target);
  } else {
    std::ifstream in(a.target_config);
    if (!in) throw DataError("cannot read " + a.target_config);
    const ModelConfig cfg = nlohmann::json::parse(in, nullptr, true, true).get<ModelConfig>();
    target = snapshot(Model(cfg));
  }
  const TransferResult r = apply_init_strategy(source, target, init_strategy_from_string(a.strategy));
  save_checkpoint(r.initialized, a.output);
  nlohmann::json report = r.report;
  for (const auto& [tag, d] : diff_checkpoints(r.initialized, target)) {
    report["max_abs_change"][std::string(to_string(tag))] = d;
  }
  write_text(a.report, report.dump(2) + "\n");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dphoi: disentangled HOI pre-training at desk scale"};
  app.require_subcommand(1);

  PretrainArgs pre;
  auto* pretrain = app.add_subcommand("pretrain", "run mixed-batch pre-training");
  pretrain->add_option("-c,--config", pre.config, "run config (JSON, comments allowed)")->check(CLI::ExistingFile);
  pretrain->add_option("-o,--output", pre.output, "output directory (relative paths go under $DPHOI_OUTPUT_ROOT)");
  pretrain->add_option("--seed", pre.seed, "override config seed");
  pretrain->add_option("--steps", pre.steps, "override total steps");
  pretrain->add_option("--fusion", pre.fusion, "override fusion mode")->check(CLI::IsMember({"max", "avg", "none"}));
  pretrain->add_flag("-q,--quiet", pre.quiet, "no progress on stderr");

  ProbeArgs pr;
  auto* probe = app.add_subcommand("probe", "dump person-query selection, verb scores and attention");
  probe->add_option("--checkpoint", pr.checkpoint)->required()->check(CLI::ExistingFile);
  probe->add_option("--manifest", pr.manifest, "defaults to the run's manifest.jsonl");
  probe->add_option("--record", pr.record, "record id (first record when omitted)");
  probe->add_option("--image", pr.image, "PPM image instead of a manifest record")->check(CLI::ExistingFile);
  probe->add_option("--threshold", pr.threshold, "person score threshold");
  probe->add_option("--fusion", pr.fusion)->check(CLI::IsMember({"max", "avg", "none"}));
  probe->add_flag("--no-attention", pr.no_attention);
  probe->add_option("-o,--output", pr.output, "JSON output (stdout by default)");

  PlotArgs pl;
  auto* plot = app.add_subcommand("plot", "loss curves as SVG plus CSV table");
  plot->add_option("logs", pl.logs, "loss_log.jsonl files to overlay")->required()->check(CLI::ExistingFile);
  plot->add_option("--label", pl.labels, "legend label per log");
  plot->add_option("-w,--window", pl.window, "moving-average window")->check(CLI::PositiveNumber);
  plot->add_option("--column", pl.column, "loss column to draw");
  plot->add_option("--svg", pl.svg);
  plot->add_option("--csv", pl.csv);

  std::string cap_in, cap_out;
  auto* parse = app.add_subcommand("parse-captions", "extract HOI triplets from caption lines");
  parse->add_option("-i,--input", cap_in)->required()->check(CLI::ExistingFile);
  parse->add_option("-o,--output", cap_out)->required();

  BankArgs bk;
  auto* bank = app.add_subcommand("build-bank", "cluster triplet prompts and sample negatives");
  bank->add_option("-i,--triplets", bk.triplets)->required()->check(CLI::ExistingFile);
  bank->add_option("-o,--output", bk.output)->required();
  bank->add_option("--clusters", bk.clusters)->check(CLI::PositiveNumber);
  bank->add_option("--per-cluster", bk.per_cluster)->check(CLI::PositiveNumber);
  bank->add_option("--dim", bk.dim)->check(CLI::PositiveNumber);
  bank->add_option("--seed", bk.seed);

  TransferArgs tr;
  auto* transfer = app.add_subcommand("transfer", "initialize a downstream checkpoint from a pre-trained one");
  transfer->add_option("--source", tr.source)->required()->check(CLI::ExistingFile);
  auto* tgt = transfer->add_option("--target", tr.target, "target layout checkpoint")->check(CLI::ExistingFile);
  auto* tgt_cfg =
      transfer->add_option("--target-config", tr.target_config, "model config JSON for a fresh target")->check(CLI::ExistingFile);
  tgt->excludes(tgt_cfg);
  transfer
      ->add_option("--strategy", tr.strategy, "backbone_encoder|plus_detection_decoder|full (or a|b|c)")
      ->required()
      ->check(CLI::IsMember({"backbone_encoder", "plus_detection_decoder", "full", "a", "b", "c"}));
  transfer->add_option("-o,--output", tr.output)->required();
  transfer->add_option("--report", tr.report, "report JSON (stdout by default)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return kInternalError;
  }

  try {
    if (*pretrain) return cmd_pretrain(pre);
    if (*probe) return cmd_probe(pr);
    if (*plot) return cmd_plot(pl);
    if (*parse) return cmd_parse_captions(cap_in, cap_out);
    if (*bank) return cmd_build_bank(bk);
    if (*transfer) {
      if (tr.target.empty() && tr.target_config.empty()) {
        std::cerr << "error: --target or --target-config is required\n\n" << transfer->help();
        return kInternalError;
      }
      return cmd_transfer(tr);
    }
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInternalError;
  }
  return kInternalError;
}
