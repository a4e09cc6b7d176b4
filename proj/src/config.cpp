#include "cdlab/config.hpp"

#include <nlohmann/json.hpp>
#include <set>

#include "cdlab/errors.hpp"
#include "cdlab/io.hpp"

namespace cdlab {

using Json = nlohmann::ordered_json;

namespace {

// Reads keys out of one JSON object and remembers which were consumed, so the
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& value) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      value = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  std::optional<Section> child(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Section(j_.at(key), path_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key " + path_ + "." + k);
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

void ExperimentConfig::validate() const {
  if (layers.empty()) throw ConfigError("config: layers must not be empty");
  for (auto l : layers) {
    if (l >= lm.model.n_layers) {
      throw ConfigError("config: layer " + std::to_string(l) + " outside a model with " +
                        std::to_string(lm.model.n_layers) + " layers");
    }
  }
  if (spaces.empty()) throw ConfigError("config: spaces must not be empty");
  for (const auto& s : spaces) canonical_space(s);
  if (lm.train.patch_rate < 0.0 || lm.train.patch_rate > 1.0) {
    throw ConfigError("config: lm.train.patch_rate must lie in [0, 1]");
  }
  if (sae.dict_mult < 2) throw ConfigError("config: sae.dict_mult must be at least 2");
  if (!(dbm.train.t_start > dbm.train.t_end) || !(dbm.train.t_end > 0.0)) {
    throw ConfigError("config: need dbm.t_start > dbm.t_end > 0");
  }
  if (out.empty()) throw ConfigError("config: out must not be empty");
}

ExperimentConfig config_from_json(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Section root(j, "config");
  if (auto w = root.child("world")) {
    w->read("n_cities", c.world.n_cities);
    w->read("n_countries", c.world.n_countries);
    w->read("n_continents", c.world.n_continents);
    w->read("seed", c.world.seed);
    w->finish();
  }
  if (auto lm = root.child("lm")) {
    auto& m = c.lm.model;
    lm->read("d_model", m.d_model);
    lm->read("n_layers", m.n_layers);
    lm->read("n_heads", m.n_heads);
    lm->read("d_mlp", m.d_mlp);
    lm->read("max_seq", m.max_seq);
    lm->read("seed", m.seed);
    auto& t = c.lm.train;
    lm->read("lr", t.lr);
    lm->read("epochs", t.epochs);
    lm->read("batch", t.batch);
    lm->read("train_seed", t.seed);
    lm->read("patch_rate", t.patch_rate);
    lm->read("fact_sequences", c.lm.fact_sequences);
    lm->read("patch_curriculum", c.lm.patch_curriculum);
    lm->finish();
  }
  root.read("split_seed", c.split_seed);
  root.read("layers", c.layers);
  root.read("spaces", c.spaces);
  if (auto s = root.child("sae")) {
    s->read("dict_mult", c.sae.dict_mult);
    s->read("k", c.sae.k);
    s->read("lambda", c.sae.lambda);
    s->read("lr", c.sae.lr);
    s->read("epochs", c.sae.epochs);
    s->read("batch", c.sae.batch);
    s->read("kl_reverse", c.sae.kl_reverse);
    s->read("seed", c.sae.seed);
    s->finish();
  }
  if (auto d = root.child("dbm")) {
    auto& t = c.dbm.train;
    d->read("lr", t.lr);
    d->read("epochs", t.epochs);
    d->read("batch", t.batch);
    d->read("t_start", t.t_start);
    d->read("t_end", t.t_end);
    d->read("mask_init", t.mask_init);
    d->read("das_lr", t.das_lr);
    d->read("seed", t.seed);
    d->read("das_init_scale", c.dbm.das_init_scale);
    d->read("das_seed", c.dbm.das_seed);
    d->finish();
  }
  root.read("error_restoration", c.error_restoration);
  root.read("out", c.out);
  root.finish();
  for (auto& s : c.spaces) s = canonical_space(s);
  c.dbm.train.interchange.error_restoration = c.error_restoration;
  c.validate();
  return c;
}

std::string config_to_json(const ExperimentConfig& c) {
  Json j;
  j["world"] = {{"n_cities", c.world.n_cities},
                {"n_countries", c.world.n_countries},
                {"n_continents", c.world.n_continents},
                {"seed", c.world.seed}};
  const auto& m = c.lm.model;
  const auto& t = c.lm.train;
  j["lm"] = {{"d_model", m.d_model},
             {"n_layers", m.n_layers},
             {"n_heads", m.n_heads},
             {"d_mlp", m.d_mlp},
             {"max_seq", m.max_seq},
             {"seed", m.seed},
             {"lr", t.lr},
             {"epochs", t.epochs},
             {"batch", t.batch},
             {"train_seed", t.seed},
             {"patch_rate", t.patch_rate},
             {"fact_sequences", c.lm.fact_sequences},
             {"patch_curriculum", c.lm.patch_curriculum}};
  j["split_seed"] = c.split_seed;
  j["layers"] = c.layers;
  j["spaces"] = c.spaces;
  j["sae"] = {{"dict_mult", c.sae.dict_mult}, {"k", c.sae.k},
              {"lambda", c.sae.lambda},       {"lr", c.sae.lr},
              {"epochs", c.sae.epochs},       {"batch", c.sae.batch},
              {"kl_reverse", c.sae.kl_reverse}, {"seed", c.sae.seed}};
  const auto& d = c.dbm.train;
  j["dbm"] = {{"lr", d.lr},
              {"epochs", d.epochs},
              {"batch", d.batch},
              {"t_start", d.t_start},
              {"t_end", d.t_end},
              {"mask_init", d.mask_init},
              {"das_lr", d.das_lr},
              {"seed", d.seed},
              {"das_init_scale", c.dbm.das_init_scale},
              {"das_seed", c.dbm.das_seed}};
  j["error_restoration"] = c.error_restoration;
  j["out"] = c.out;
  return j.dump(2) + "\n";
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw ConfigError("config file " + path.string() + " does not exist");
  }
  try {
    return config_from_json(read_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_seed_override(ExperimentConfig& c, std::uint64_t base) {
  c.world.seed = base;
  c.lm.model.seed = base + 1;
  c.lm.train.seed = base + 2;
  c.sae.seed = base + 3;
  c.dbm.train.seed = base + 4;
  c.split_seed = base + 5;
  c.dbm.das_seed = base + 8;
}

std::string canonical_space(const std::string& name) {
  if (name == "neurons" || name == "das") return name;
  const std::string prefix = "sae:";
  const auto variant = name.rfind(prefix, 0) == 0 ? name.substr(prefix.size()) : name;
  try {
    return prefix + std::string(variant_name(parse_variant(variant)));
  } catch (const ConfigError&) {
    throw ConfigError("unknown feature space '" + name +
                      "' (expected neurons, das or sae:<standard|topk|e2e|e2e_ds>)");
  }
}

std::optional<SaeVariant> space_variant(const std::string& canonical) {
  if (canonical.rfind("sae:", 0) != 0) return std::nullopt;
  return parse_variant(canonical.substr(4));
}

}  // namespace cdlab
