#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "kvprobe/error.hpp"
#include "kvprobe/intervention.hpp"
#include "kvprobe/metrics.hpp"
#include "kvprobe/orchestrator.hpp"
#include "kvprobe/steering.hpp"

namespace py = pybind11;
using namespace kvprobe;

namespace {

py::array_t<float> to_array(const std::vector<std::vector<float>>& rows) {
  const auto n = static_cast<py::ssize_t>(rows.size());
  const auto v = static_cast<py::ssize_t>(rows.empty() ? 0 : rows.front().size());
  py::array_t<float> out({n, v});
  auto w = out.mutable_unchecked<2>();
  for (py::ssize_t i = 0; i < n; ++i)
    for (py::ssize_t j = 0; j < v; ++j) w(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return out;
}

py::dict script_dict(const ConversationScript& s) {
  py::dict d;
  d["system"] = s.system;
  d["user_1"] = s.user_1;
  d["assistant_1"] = s.assistant_1;
  d["user_2"] = s.user_2;
  d["answer_prefix"] = s.answer_prefix;
  return d;
}

nlohmann::json to_json(py::handle obj) {
  // Round trip through the json module keeps the binding free of a converter.
  const auto dumps = py::module_::import("json").attr("dumps");
  return nlohmann::json::parse(py::str(dumps(obj)).cast<std::string>());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "kvprobe engine bindings";

  auto base = py::register_exception<Error>(m, "KvprobeError");
  py::register_exception<InvalidArgument>(m, "InvalidArgument", base.ptr());
  py::register_exception<LoadError>(m, "LoadError", base.ptr());
  py::register_exception<TokenizerError>(m, "TokenizerError", base.ptr());
  py::register_exception<SequenceOverflow>(m, "SequenceOverflow", base.ptr());
  py::register_exception<DegenerateDirection>(m, "DegenerateDirection", base.ptr());
  py::register_exception<SchemaError>(m, "SchemaError", base.ptr());

  m.def("engine_version", &engine_version);
  m.def("middle_third_layers", &middle_third_layers, py::arg("n_layers"));

  py::class_<Tokenizer>(m, "Tokenizer")
      .def_static("byte_level", &Tokenizer::byte_level)
      .def_static("from_vocab_file", &Tokenizer::from_vocab_file, py::arg("path"))
      .def_property_readonly("vocab_size", &Tokenizer::vocab_size)
      .def("encode", &Tokenizer::encode, py::arg("text"))
      .def(
          "decode", [](const Tokenizer& self, const std::vector<int>& ids) { return self.decode(ids); },
          py::arg("ids"));

  py::class_<Model>(m, "Model")
      .def_static("load", py::overload_cast<const std::filesystem::path&>(&Model::load), py::arg("path"))
      .def_property_readonly("n_layers", [](const Model& self) { return self.config().n_layers; })
      .def_property_readonly("d_model", [](const Model& self) { return self.config().d_model; })
      .def_property_readonly("vocab_size", [](const Model& self) { return self.config().vocab_size; })
      .def_property_readonly("max_seq_len", [](const Model& self) { return self.config().max_seq_len; })
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def(
          "logits",
          [](const Model& self, const std::vector<int>& tokens) {
            auto cache = self.new_cache();
            ForwardResult r;
            {
              py::gil_scoped_release release;
              r = self.forward_extend(cache, tokens);
            }
            return to_array(r.logits);
          },
          py::arg("tokens"), "Output logits for every position, shape [len(tokens), vocab].")
      .def(
          "hidden_states",
          [](const Model& self, const std::vector<int>& tokens, int layer) {
            auto cache = self.new_cache();
            CaptureSpec spec;
            spec.layers = {layer};
            spec.all_positions = true;
            const auto r = self.forward_extend(cache, tokens, nullptr, spec);
            std::vector<std::vector<float>> rows;
            for (const auto& c : r.captures) rows.push_back(c.hidden);
            return to_array(rows);
          },
          py::arg("tokens"), py::arg("layer"))
      .def(
          "logit_lens",
          [](const Model& self, const std::vector<float>& hidden) {
            return self.logit_lens(std::span<const float>(hidden));
          },
          py::arg("hidden"));

  m.def("core_conditions", [] {
    std::vector<std::string> out;
    for (const auto& c : core_conditions()) out.push_back(c.name());
    return out;
  });
  m.def("corpus_concepts", [](const std::string& corpus) { return PromptCorpus::by_name(corpus).concepts(); },
        py::arg("corpus") = "mini");
  m.def(
      "render_detection_prompt",
      [](const std::string& condition, const std::string& corpus) {
        return script_dict(PromptCorpus::by_name(corpus).render_detection_prompt(ConditionSpec::parse(condition)));
      },
      py::arg("condition"), py::arg("corpus") = "mini");
  m.def("shuffle_orderings", &shuffle_orderings, py::arg("seed"), py::arg("count") = 5);

  m.def("balanced_accuracy", &balanced_accuracy, py::arg("tpr"), py::arg("fpr"));
  m.def("lift", &lift, py::arg("diagonal"), py::arg("background"));
  m.def(
      "mutual_information",
      [](const std::vector<std::vector<double>>& rows) {
        const MIResult r = mutual_information(rows);
        return py::make_tuple(r.bits, r.max_bits, r.efficiency);
      },
      py::arg("rows"), "(bits, max_bits, efficiency) under a uniform prior over rows.");
  m.def(
      "pearson_r",
      [](const std::vector<double>& xs, const std::vector<double>& ys) {
        const PearsonResult r = pearson_r(xs, ys);
        return py::make_tuple(r.r, r.p);
      },
      py::arg("xs"), py::arg("ys"));

  m.def(
      "run_grid",
      [](py::dict config, std::vector<std::string> kinds) {
        const RunConfig c = RunConfig::from_json(to_json(config));
        std::set<TrialKind> ks;
        for (const auto& k : kinds) ks.insert(trial_kind_from_string(k));
        GridSummary s;
        {
          py::gil_scoped_release release;
          s = run_grid(c, ks);
        }
        py::dict out;
        out["executed"] = s.executed;
        out["skipped"] = s.skipped;
        out["failures"] = s.failures;
        out["coefficient"] = s.manifest.coefficient;
        return out;
      },
      py::arg("config"), py::arg("kinds") = std::vector<std::string>{"detection", "identification"});
  m.def("analyze", &analyze, py::arg("records_dir"), py::arg("out_dir"));
  m.def("report", &report, py::arg("summaries_dir"), py::arg("out_dir"));
}
