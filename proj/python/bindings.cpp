#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <memory>
#include <sstream>

#include "cdlab/config.hpp"
#include "cdlab/errors.hpp"
#include "cdlab/evaluation.hpp"
#include "cdlab/feature_space.hpp"
#include "cdlab/intervention.hpp"
#include "cdlab/model.hpp"
#include "cdlab/pipeline.hpp"
#include "cdlab/sae.hpp"
#include "cdlab/world.hpp"

namespace py = pybind11;
using namespace cdlab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  std::vector<double> v(a.data(), a.data() + a.size());
  return Tensor(std::move(shape), std::move(v));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

Attribute attr_arg(const std::string& s) { return parse_attribute(s); }

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["layer"] = r.layer;
  d["space"] = r.space;
  d["target"] = std::string(attribute_name(r.target));
  d["intervened_acc"] = r.intervened_acc;
  d["preserved_acc"] = r.preserved_acc;
  d["disentangle"] = r.disentangle;
  d["inactive_frac"] = r.inactive_frac;
  d["intervened_frac"] = r.intervened_frac;
  d["active_nonintervened_frac"] = r.active_nonintervened_frac;
  d["recon_loss"] = r.recon_loss;
  d["recon_knowledge"] = r.recon_knowledge;
  d["empty_baseline"] = r.empty_baseline;
  d["n_records"] = r.n_records;
  return d;
}

// Pipeline bound to a config text and an output directory.
class PyPipeline {
 public:
  PyPipeline(const std::string& config_json, const std::string& out, bool verbose)
      : p_(config_from_json(config_json), {out, "cdlab", verbose ? &log_ : nullptr}) {}

  Pipeline& get() { return p_; }
  std::string log() const { return log_.str(); }

 private:
  std::ostringstream log_;
  Pipeline p_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Toy-LM feature-space interventions";

  // Later registrations are tried first, so the base class goes first.
  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<PipelineError>(m, "PipelineError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());

  m.def("default_config", [] { return config_to_json(ExperimentConfig{}); });
  m.def("normalize_config", [](const std::string& text) { return config_to_json(config_from_json(text)); },
        "Parse, validate and re-serialize a config with every key present.");
  m.def("load_config", [](const std::filesystem::path& p) { return config_to_json(load_config(p)); });

  m.def("disentangle_score", &disentangle_score);
  m.def("display_round", &display_round);
  m.def("cayley", [](const Array& a) { return to_array(cayley(to_tensor(a))); });
  m.def("partition", [](const std::vector<bool>& active, const Selection& sel) {
    const auto p = partition_from_activity(active, sel);
    return py::make_tuple(p.inactive, p.intervened, p.active_nonintervened);
  });

  py::class_<World>(m, "World")
      .def_static("generate",
                  [](std::size_t n_cities, std::size_t n_countries, std::size_t n_continents,
                     std::uint64_t seed) {
                    return generate_world({n_cities, n_countries, n_continents, seed});
                  },
                  py::arg("n_cities") = 40, py::arg("n_countries") = 12, py::arg("n_continents") = 4,
                  py::arg("seed") = 1)
      .def_static("read", [](const std::filesystem::path& p) { return read_world(p); })
      .def("write", [](const World& w, const std::filesystem::path& p) { write_world(p, w); })
      .def_property_readonly("vocab", [](const World& w) { return w.vocab.words(); })
      .def("token", [](const World& w, const std::string& word) { return w.vocab.id(word); })
      .def("word", [](const World& w, TokenId id) { return w.vocab.word(id); })
      .def_property_readonly("facts",
                             [](const World& w) {
                               std::vector<std::tuple<TokenId, TokenId, TokenId>> out;
                               for (const auto& f : w.facts) out.emplace_back(f.city, f.country, f.continent);
                               return out;
                             })
      .def("prompt", [](const World& w, TokenId city, const std::string& attr) {
        return build_prompt(w.vocab, city).get(attr_arg(attr));
      });

  py::class_<ToyLM>(m, "ToyLM")
      .def_static("load", [](const std::filesystem::path& p) { return ToyLM::load(p); })
      .def_property_readonly("n_layers", [](const ToyLM& lm) { return lm.config().n_layers; })
      .def_property_readonly("d_model", [](const ToyLM& lm) { return lm.config().d_model; })
      .def_property_readonly("vocab_size", [](const ToyLM& lm) { return lm.config().vocab_size; })
      .def("logits", [](const ToyLM& lm, const std::vector<TokenId>& tokens) {
        NoGradGuard ng;
        return to_array(lm.forward(tokens));
      })
      .def("greedy_answer", [](const ToyLM& lm, const std::vector<TokenId>& tokens) {
        NoGradGuard ng;
        return lm.greedy_answer(tokens);
      })
      .def("known_facts", [](const ToyLM& lm, const World& w) {
        std::vector<TokenId> cities;
        for (const auto& f : filter_known(lm, w)) cities.push_back(f.city);
        return cities;
      });

  py::class_<Sae, std::shared_ptr<Sae>>(m, "Sae")
      .def_static("load", [](const std::filesystem::path& p) { return std::make_shared<Sae>(Sae::load(p)); })
      .def_property_readonly("variant", [](const Sae& s) { return std::string(variant_name(s.variant)); })
      .def_property_readonly("dict_size", &Sae::dict_size)
      .def_property_readonly("d_model", &Sae::d_model)
      .def("encode", [](const Sae& s, const Array& x) {
        NoGradGuard ng;
        return to_array(s.encode(to_tensor(x)));
      })
      .def("decode", [](const Sae& s, const Array& f) {
        NoGradGuard ng;
        return to_array(s.decode(to_tensor(f)));
      })
      .def("reconstruct", [](const Sae& s, const Array& x) {
        NoGradGuard ng;
        return to_array(s.reconstruct(to_tensor(x)));
      });

  py::class_<FeatureSpace>(m, "FeatureSpace")
      .def_static("neurons", &FeatureSpace::neurons)
      .def_static("das", [](const Array& a) { return FeatureSpace::das(OrthParam{to_tensor(a)}); },
                  "DAS space with rotation cayley(A).")
      .def_static("sae", [](std::shared_ptr<Sae> s) { return FeatureSpace::sae(std::move(s)); })
      .def_property_readonly("name", &FeatureSpace::name)
      .def_property_readonly("feature_dim", &FeatureSpace::feature_dim)
      .def("to_features", [](const FeatureSpace& s, const Array& h) {
        NoGradGuard ng;
        return to_array(s.to_features(to_tensor(h)));
      })
      .def("from_features", [](const FeatureSpace& s, const Array& f) {
        NoGradGuard ng;
        return to_array(s.from_features(to_tensor(f)));
      });

  py::class_<LmBackend>(m, "Backend")
      .def(py::init<const ToyLM&, const World&, std::size_t>(), py::keep_alive<1, 2>(),
           py::keep_alive<1, 3>(), py::arg("model"), py::arg("world"), py::arg("layer"))
      .def("hidden", [](const LmBackend& b, TokenId city, const std::string& attr) {
        return to_array(b.hidden(city, attr_arg(attr)));
      })
      .def("clean_logits", [](const LmBackend& b, TokenId city, const std::string& attr) {
        NoGradGuard ng;
        return to_array(b.clean_logits(city, attr_arg(attr)));
      })
      .def("interchange",
           [](const LmBackend& b, const FeatureSpace& space, const Selection& sel, TokenId base,
              TokenId source, const std::string& attr, bool error_restoration) {
             NoGradGuard ng;
             return to_array(interchange(b, space, sel, base, source, attr_arg(attr), {error_restoration}));
           },
           py::arg("space"), py::arg("selection"), py::arg("base"), py::arg("source"),
           py::arg("queried"), py::arg("error_restoration") = false);

  py::class_<PyPipeline>(m, "Pipeline")
      .def(py::init<const std::string&, const std::string&, bool>(), py::arg("config_json"),
           py::arg("out"), py::arg("verbose") = false)
      .def_property_readonly("config_hash", [](PyPipeline& p) { return p.get().config_hash(); })
      .def_property_readonly("log", &PyPipeline::log)
      .def("worldgen", [](PyPipeline& p) { return p.get().worldgen(); })
      .def("train_lm", [](PyPipeline& p) { return p.get().train_lm(); })
      .def("train_sae", [](PyPipeline& p, std::size_t layer, const std::string& variant) {
        return p.get().train_sae(layer, parse_variant(variant));
      })
      .def("learn_mask", [](PyPipeline& p, std::size_t layer, const std::string& space,
                            const std::string& attr) {
        return p.get().learn_mask(layer, canonical_space(space), attr_arg(attr));
      })
      .def("evaluate", [](PyPipeline& p) { return p.get().evaluate(); })
      .def("report", [](PyPipeline& p) { return p.get().report(); })
      .def("run_all", [](PyPipeline& p) { return p.get().run_all(); })
      .def_property_readonly("world_dir", [](PyPipeline& p) { return p.get().world_dir(); })
      .def_property_readonly("lm_dir", [](PyPipeline& p) { return p.get().lm_dir(); })
      .def_property_readonly("eval_dir", [](PyPipeline& p) { return p.get().eval_dir(); })
      .def("sae_dir", [](PyPipeline& p, std::size_t layer, const std::string& variant) {
        return p.get().sae_dir(layer, parse_variant(variant));
      });

  m.def("read_reports", [](const std::string& jsonl) {
    py::list out;
    for (const auto& r : reports_from_jsonl(jsonl)) out.append(report_dict(r));
    return out;
  });
}
