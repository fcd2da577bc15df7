// Python access to matching, fusion, caption parsing, pretraining, probing
// and checkpoint transfer. JSON results cross as strings and are decoded in
// the package __init__.

#include "dphoi/app.hpp"
#include "dphoi/branches.hpp"
#include "dphoi/caption.hpp"
#include "dphoi/errors.hpp"
#include "dphoi/losses.hpp"
#include "dphoi/matching.hpp"
#include "dphoi/trainer.hpp"
#include "dphoi/transfer.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

namespace py = pybind11;
using namespace dphoi;

namespace {

Image image_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw ShapeError("image must be an HxWx3 array");
  Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), 3);
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

RunConfig config_from(const std::string& config_json) {
  return nlohmann::json::parse(config_json, nullptr, true, true).get<RunConfig>();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "dphoi core bindings";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<CheckpointError>(m, "CheckpointError", base.ptr());
  py::register_exception<NonFiniteError>(m, "NonFiniteError", base.ptr());
  py::register_exception<StateError>(m, "StateError", base.ptr());
  py::register_exception<EmptyRpqError>(m, "EmptyRpqError", base.ptr());

  m.def(
      "hungarian_match",
      [](const Matrix& cost) {
        const MatchResult r = hungarian_match(cost);
        return py::make_tuple(r.pairs, r.total_cost);
      },
      py::arg("cost"), "Minimal-cost assignment: ([(query, target)], total cost).");

  m.def(
      "fuse",
      [](const Matrix& scores, const std::string& mode) {
        return fuse_verb_predictions(scores, fusion_mode_from_string(mode)).scores;
      },
      py::arg("scores"), py::arg("mode") = "max");

  m.def(
      "select_rpq",
      [](const Matrix& object_logits, double threshold, int person_class) {
        const auto scores = person_scores(object_logits, person_class);
        std::vector<Index> out;
        for (std::size_t i = 0; i < scores.size(); ++i) {
          if (scores[i] > threshold) out.push_back(static_cast<Index>(i));
        }
        return out;
      },
      py::arg("object_logits"), py::arg("threshold") = 0.9, py::arg("person_class") = 0);

  m.def(
      "info_nce",
      [](double positive, const Matrix& negatives, double temperature) {
        return info_nce_bidirectional(ag::Var(Matrix::Constant(1, 1, positive)), ag::Var(negatives), temperature)
            .item();
      },
      py::arg("positive"), py::arg("negatives"), py::arg("temperature") = 0.07);

  m.def(
      "parse_caption",
      [](const std::string& text, const std::string& caption_id) {
        std::vector<std::tuple<std::string, std::string, std::string>> out;
        for (const auto& t : parse_caption(text, caption_id)) out.emplace_back(t.human, t.verb, t.object);
        return out;
      },
      py::arg("text"), py::arg("caption_id") = "");

  m.def(
      "template_prompt",
      [](const std::string& human, const std::string& verb, const std::string& object) {
        return template_prompt({human, verb, object, ""});
      },
      py::arg("human"), py::arg("verb"), py::arg("object"));

  m.def(
      "_default_config", [] { return nlohmann::json(RunConfig{}).dump(); });
  m.def(
      "_load_config", [](const std::string& path) { return nlohmann::json(load_run_config(path)).dump(); },
      py::arg("path"));

  m.def(
      "_run_pretrain",
      [](const std::string& config_json) {
        const RunConfig c = config_from(config_json);
        PretrainSummary s;
        {
          py::gil_scoped_release release;
          s = run_pretrain(c);
        }
        return nlohmann::json(s).dump();
      },
      py::arg("config_json"));

  m.def(
      "_probe",
      [](const std::string& checkpoint, const py::array_t<double, py::array::c_style | py::array::forcecast>& image,
         std::optional<double> threshold, const std::string& fusion, bool attention) {
        const auto model = model_from_checkpoint(load_checkpoint(checkpoint));
        ProbeOptions opts;
        opts.threshold = threshold;
        opts.fusion = fusion_mode_from_string(fusion);
        opts.attention = attention;
        return probe_image(*model, image_from_array(image), opts).dump();
      },
      py::arg("checkpoint"), py::arg("image"), py::arg("threshold") = py::none(), py::arg("fusion") = "max",
      py::arg("attention") = true);

  m.def(
      "_transfer",
      [](const std::string& source, const std::string& target, const std::string& strategy, const std::string& output) {
        const Checkpoint tgt = load_checkpoint(target);
        const TransferResult r = apply_init_strategy(load_checkpoint(source), tgt, init_strategy_from_string(strategy));
        save_checkpoint(r.initialized, output);
        nlohmann::json report = r.report;
        for (const auto& [tag, d] : diff_checkpoints(r.initialized, tgt)) {
          report["max_abs_change"][std::string(to_string(tag))] = d;
        }
        return report.dump();
      },
      py::arg("source"), py::arg("target"), py::arg("strategy"), py::arg("output"));

  m.def(
      "_init_checkpoint",
      [](const std::string& model_config_json, const std::string& output) {
        const ModelConfig c = nlohmann::json::parse(model_config_json).get<ModelConfig>();
        save_checkpoint(snapshot(Model(c)), output);
      },
      py::arg("model_config_json"), py::arg("output"));
}
