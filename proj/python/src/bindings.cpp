// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <sstream>

#include "mare/checkpoint.hpp"
#include "mare/cli.hpp"
#include "mare/error.hpp"
#include "mare/eval.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace mare;

namespace {

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::handle& o) {
  if (o.is_none()) return json::object();
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

Dataset dataset_from_examples(const py::list& examples, std::optional<std::size_t> num_aspects) {
  std::ostringstream text;
  for (const auto& e : examples) text << from_py(e).dump() << "\n";
  std::istringstream in(text.str());
  return parse_jsonl(in, num_aspects);
}

py::list dataset_examples(const Dataset& ds) {
  py::list out;
  for (const auto& ex : ds.examples) out.append(to_py(example_to_json(ex)));
  return out;
}

// A trained model together with its vocabulary and training metadata.
struct PyModel {
  std::unique_ptr<MareModel> model;
  Vocabulary vocab;
  std::uint64_t seed = 1;
  json metadata = json::object();
  std::vector<json> metrics;

  TrainingMode mode(const std::optional<std::string>& override_mode) const {
    if (override_mode) return parse_training_mode(*override_mode);
    if (metadata.contains("train") && metadata["train"].contains("mode")) {
      return parse_training_mode(metadata["train"]["mode"].get<std::string>());
    }
    return TrainingMode::kMultitask;
  }
  EncodedDataset encode_for(const Dataset& ds) const {
    if (ds.num_aspects != model->config().num_aspects) {
      throw ConfigError("dataset has " + std::to_string(ds.num_aspects) + " aspects, model expects " +
                        std::to_string(model->config().num_aspects));
    }
    return encode(ds, vocab);
  }
};

PyModel train_model(const Dataset& train_ds, const std::optional<Dataset>& val_ds, const py::object& model_config,
                    const py::object& train_config, std::uint64_t seed) {
  const json mj = from_py(model_config), tj = from_py(train_config);
  auto mc = mare_config_from_json(mj);
  auto tc = train_config_from_json(tj);
  tc.seed = seed;
  PyModel m;
  m.vocab = Vocabulary::build(train_ds);
  cli::fit_model_config(mc, train_ds, val_ds ? &*val_ds : nullptr, m.vocab, mj.contains("sparsity_targets"));
  tc.validate();
  m.model = std::make_unique<MareModel>(mc, seed);
  m.seed = seed;
  m.metadata = {{"train", to_json(tc)}, {"version", cli::version_string()}};
  const auto train_data = encode(train_ds, m.vocab);
  std::optional<EncodedDataset> val_data;
  if (val_ds) val_data = encode(*val_ds, m.vocab);
  {
    py::gil_scoped_release release;
    const auto result = train(*m.model, train_data, val_data ? &*val_data : nullptr, tc);
    for (const auto& e : result.epochs) m.metrics.push_back(e.to_json());
  }
  return m;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-aspect rationale extraction";

  auto base = py::register_exception<Error>(m, "MareError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<SchemaError>(m, "SchemaError", base);
  py::register_exception<DimensionError>(m, "DimensionError", base);
  py::register_exception<LengthError>(m, "LengthError", base);
  py::register_exception<VocabularyError>(m, "VocabularyError", base);
  py::register_exception<DivergenceError>(m, "DivergenceError", base);

  m.def("version", &cli::version_string);

  py::class_<Dataset>(m, "Dataset")
      .def_static("from_examples", &dataset_from_examples, py::arg("examples"), py::arg("num_aspects") = py::none(),
                  "Build from JSONL-style dicts: {'tokens', 'labels', 'rationales'}.")
      .def_static("load_jsonl", &load_jsonl, py::arg("path"), py::arg("num_aspects") = py::none())
      .def("save_jsonl", [](const Dataset& d, const std::string& path) { save_jsonl(d, path); })
      .def_readonly("num_aspects", &Dataset::num_aspects)
      .def("__len__", &Dataset::size)
      .def("examples", &dataset_examples)
      .def("stats", [](const Dataset& d) { return to_py(compute_stats(d).to_json()); })
      .def(
          "split",
          [](const Dataset& d, double train_fraction, double val_fraction) {
            auto s = split_dataset(d, train_fraction, val_fraction);
            return py::make_tuple(std::move(s.train), std::move(s.val), std::move(s.test));
          },
          py::arg("train_fraction") = 0.8, py::arg("val_fraction") = 0.1);

  m.def(
      "synth",
      [](std::size_t n, std::uint64_t seed, std::size_t num_aspects, const py::object& grammar) {
        auto j = from_py(grammar);
        auto c = j.empty() ? SynthGrammarConfig{} : SynthGrammarConfig::from_json(j);
        if (!j.contains("num_aspects")) c.num_aspects = num_aspects;
        c.seed = seed;
        return synth_generate(c, n);
      },
      py::arg("n"), py::arg("seed") = 1, py::arg("num_aspects") = 3, py::arg("grammar") = py::none(),
      "Synthetic corpus with planted rationales.");

  m.def(
      "token_prf",
      [](const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gold) {
        const auto p = token_prf(pred, gold);
        return py::make_tuple(p.precision, p.recall, p.f1);
      },
      py::arg("pred"), py::arg("gold"), "Token-level (precision, recall, F1).");

  py::class_<PyModel>(m, "Model")
      .def_static("train", &train_model, py::arg("train"), py::arg("val") = py::none(),
                  py::arg("model_config") = py::none(), py::arg("train_config") = py::none(), py::arg("seed") = 1)
      .def_static(
          "load",
          [](const std::string& path) {
            auto ck = load_checkpoint(path);
            PyModel m;
            m.model = std::move(ck.model);
            m.vocab = std::move(ck.vocab);
            m.seed = ck.seed;
            m.metadata = std::move(ck.metadata);
            return m;
          },
          py::arg("path"))
      .def("save", [](const PyModel& m, const std::string& path) { save_checkpoint(path, *m.model, m.seed, m.vocab, m.metadata); })
      .def_property_readonly("config", [](const PyModel& m) { return to_py(to_json(m.model->config())); })
      .def_property_readonly("metrics", [](const PyModel& m) { return to_py(json(m.metrics)); })
      .def_property_readonly("seed", [](const PyModel& m) { return m.seed; })
      .def(
          "evaluate",
          [](const PyModel& m, const Dataset& ds, std::optional<std::string> mode, const std::string& aggregation) {
            const auto agg = aggregation == "macro" ? Aggregation::kMacro : Aggregation::kMicro;
            if (aggregation != "macro" && aggregation != "micro") throw ConfigError("aggregation must be micro|macro");
            auto report = evaluate(*m.model, m.encode_for(ds), {.mode = m.mode(mode), .aggregation = agg});
            report.meta.seed = m.seed;
            return to_py(report_to_json(report));
          },
          py::arg("data"), py::arg("mode") = py::none(), py::arg("aggregation") = "micro")
      .def(
          "report",
          [](const PyModel& m, const Dataset& ds, const std::string& format, std::optional<std::string> mode) {
            auto report = evaluate(*m.model, m.encode_for(ds), {.mode = m.mode(mode), .keep_examples = false});
            report.meta.seed = m.seed;
            return render_report(report, parse_report_format(format));
          },
          py::arg("data"), py::arg("format") = "markdown", py::arg("mode") = py::none())
      .def(
          "predict",
          [](const PyModel& m, const Dataset& ds, std::optional<std::string> mode) {
            const auto p = predict(*m.model, m.encode_for(ds), m.mode(mode));
            py::dict out;
            out["labels"] = p.labels;
            out["masks"] = p.masks;
            return out;
          },
          py::arg("data"), py::arg("mode") = py::none(), "Predicted labels [n][k] and binary masks [n][k][len].")
      .def(
          "probe",
          [](const PyModel& m, const std::vector<std::string>& tokens, std::size_t a, std::size_t b,
             std::uint64_t seed) {
            Rng rng(seed, Stream::kProbe);
            return to_py(deletion_completeness_probe(*m.model, m.vocab.encode(tokens), a, b, rng).to_json());
          },
          py::arg("tokens"), py::arg("aspect_a"), py::arg("aspect_b"), py::arg("seed") = 1,
          "Perturb tokens only aspect b selects and measure the change in aspect a's logits.");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> full = {"mare"};
        full.insert(full.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : full) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run the command-line tool in-process; returns (exit_code, stdout, stderr).");
}
