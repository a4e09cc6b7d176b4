#include "cdlab/pipeline.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <memory>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>

#include "cdlab/errors.hpp"
#include "cdlab/feature_space.hpp"
#include "cdlab/intervention.hpp"
#include "cdlab/io.hpp"
#include "cdlab/model.hpp"
#include "cdlab/sae.hpp"

namespace cdlab {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
  return s;
}

namespace {

Json config_json(const ExperimentConfig& c) { return Json::parse(config_to_json(c)); }

std::string hash_of(const Json& j) { return hex64(fnv1a64(j.dump())); }

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Exclusive lock on a sibling file for read-modify-write of the manifest.
class FileLock {
 public:
  explicit FileLock(const fs::path& path) {
    fs::create_directories(path.parent_path());
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) throw PipelineError("cannot open lock file " + path.string());
    ::flock(fd_, LOCK_EX);
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

std::string curve_tsv(const std::vector<MaskCurvePoint>& curve) {
  std::ostringstream out;
  out << "epoch\ttemperature\ttrain_loss\tval_accuracy\tsnapped\tselected\n";
  for (const auto& p : curve) {
    out << p.epoch << '\t' << format_double(p.temperature) << '\t' << format_double(p.train_loss)
        << '\t' << (std::isnan(p.val_accuracy) ? std::string("nan") : format_double(p.val_accuracy))
        << '\t' << format_double(p.snapped) << '\t' << format_double(p.selected) << '\n';
  }
  return out.str();
}

}  // namespace

Pipeline::Pipeline(ExperimentConfig config, Options options)
    : config_(std::move(config)), opts_(std::move(options)) {
  config_.validate();
  config_.dbm.train.interchange.error_restoration = config_.error_restoration;
  if (opts_.out.empty()) opts_.out = config_.out;
}

std::string Pipeline::config_hash() const {
  auto j = config_json(config_);
  j.erase("out");
  return hash_of(j);
}

// Hashes chain: every stage hashes its own config sections together with the
// hash of each stage it reads from.
std::string Pipeline::world_hash() const {
  return hash_of(Json{{"stage", "world"}, {"world", config_json(config_)["world"]}});
}

std::string Pipeline::lm_hash() const {
  return hash_of(
      Json{{"stage", "lm"}, {"world", world_hash()}, {"lm", config_json(config_)["lm"]}});
}

std::string Pipeline::data_hash() const {
  return hash_of(Json{{"stage", "data"}, {"lm", lm_hash()}, {"split_seed", config_.split_seed}});
}

std::string Pipeline::sae_hash(std::size_t layer, SaeVariant variant) const {
  return hash_of(Json{{"stage", "sae"},
                      {"lm", lm_hash()},
                      {"sae", config_json(config_)["sae"]},
                      {"layer", layer},
                      {"variant", variant_name(variant)}});
}

std::string Pipeline::mask_hash(std::size_t layer, const std::string& space,
                                Attribute attr) const {
  Json j{{"stage", "mask"},
         {"data", data_hash()},
         {"dbm", config_json(config_)["dbm"]},
         {"error_restoration", config_.error_restoration},
         {"layer", layer},
         {"space", space},
         {"attr", attribute_name(attr)}};
  if (auto v = space_variant(space)) j["sae"] = sae_hash(layer, *v);
  return hash_of(j);
}

std::string Pipeline::eval_hash() const {
  Json cells = Json::array();
  for (auto layer : config_.layers) {
    for (const auto& space : config_.spaces) {
      for (auto attr : kAttributes) {
        cells.push_back(cell_absent(layer, space) ? std::string("absent")
                                                  : mask_hash(layer, space, attr));
      }
    }
  }
  return hash_of(Json{{"stage", "eval"}, {"data", data_hash()}, {"cells", cells}});
}

fs::path Pipeline::world_dir() const { return opts_.out / "world" / world_hash(); }
fs::path Pipeline::lm_dir() const { return opts_.out / "lm" / lm_hash(); }
fs::path Pipeline::data_dir() const { return opts_.out / "data" / data_hash(); }
fs::path Pipeline::sae_dir(std::size_t layer, SaeVariant variant) const {
  return opts_.out / "sae" / sae_hash(layer, variant);
}
fs::path Pipeline::mask_dir(std::size_t layer, const std::string& space, Attribute attr) const {
  return opts_.out / "mask" / mask_hash(layer, space, attr);
}
fs::path Pipeline::eval_dir() const { return opts_.out / "eval" / eval_hash(); }

bool Pipeline::cell_absent(std::size_t layer, const std::string& space) const {
  const auto v = space_variant(space);
  return v && *v == SaeVariant::E2EDs && layer + 1 >= config_.lm.model.n_layers;
}

bool Pipeline::complete(const fs::path& dir, const std::string& hash) const {
  const auto stage = dir / "stage.json";
  if (!fs::exists(stage)) return false;
  try {
    const auto j = Json::parse(read_file(stage));
    if (j.at("hash").get<std::string>() != hash) return false;
    for (const auto& a : j.at("artifacts")) {
      if (!fs::exists(dir / a.get<std::string>())) return false;
    }
    return true;
  } catch (const nlohmann::json::exception&) {
    return false;
  }
}

void Pipeline::finish_stage(const fs::path& dir, const std::string& stage, const std::string& hash,
                            const std::vector<std::string>& artifacts) {
  auto cfg = config_json(config_);
  cfg.erase("out");
  Json s{{"format_version", kManifestVersion},
         {"stage", stage},
         {"hash", hash},
         {"config_hash", config_hash()},
         {"config", cfg},
         {"artifacts", artifacts}};
  write_file_atomic(dir / "stage.json", s.dump(2) + "\n");
  record(dir, stage, artifacts);
}

void Pipeline::record(const fs::path& dir, const std::string& stage,
                      const std::vector<std::string>& artifacts) {
  auto cfg = config_json(config_);
  cfg.erase("out");
  FileLock lock(opts_.out / ".manifest.lock");
  const auto path = opts_.out / "manifest.json";
  Json m;
  if (fs::exists(path)) {
    try {
      m = Json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw PipelineError("manifest " + path.string() + " is corrupt: " + e.what());
    }
  } else {
    m = Json{{"format_version", kManifestVersion}, {"configs", Json::object()},
             {"stages", Json::object()}};
  }
  m["configs"][config_hash()] = cfg;
  Json paths = Json::array();
  for (const auto& a : artifacts) paths.push_back((fs::relative(dir, opts_.out) / a).string());
  auto key = fs::relative(dir, opts_.out).string();
  if (stage == "report") key += "/report";
  m["stages"][key] = Json{{"stage", stage},
                                                            {"config_hash", config_hash()},
                                                            {"completed_at", utc_now()},
                                                            {"artifacts", paths},
                                                            {"formats",
                                                             {{"checkpoint", 1},
                                                              {"world", 1},
                                                              {"dataset", 1},
                                                              {"stage", kManifestVersion}}}};
  write_file_atomic(path, m.dump(2) + "\n");
}

void Pipeline::require(const fs::path& dir, const std::string& hash, const std::string& what,
                       const std::string& command) const {
  if (complete(dir, hash)) return;
  throw PipelineError("missing " + what + " (expected in " + dir.string() + "); run `" +
                      opts_.invocation + " " + command + "` first");
}

void Pipeline::note(const std::string& line) const {
  if (opts_.log) *opts_.log << line << '\n' << std::flush;
}

World Pipeline::load_world() const {
  require(world_dir(), world_hash(), "world", "worldgen");
  auto world = read_world(world_dir() / "world.tsv");
  check_world(world);
  return world;
}

fs::path Pipeline::worldgen() {
  const auto dir = world_dir();
  if (complete(dir, world_hash())) {
    note("[worldgen] up to date: " + dir.string());
    return dir;
  }
  auto world = generate_world(config_.world);
  check_world(world);
  write_world(dir / "world.tsv", world);
  finish_stage(dir, "worldgen", world_hash(), {"world.tsv"});
  note("[worldgen] " + std::to_string(world.facts.size()) + " cities, vocabulary of " +
       std::to_string(world.vocab.size()) + " -> " + dir.string());
  return dir;
}

fs::path Pipeline::train_lm() {
  const auto world = load_world();
  const auto dir = lm_dir();
  if (complete(dir, lm_hash())) {
    note("[train-lm] model up to date: " + dir.string());
  } else {
    auto mc = config_.lm.model;
    mc.vocab_size = world.vocab.size();
    const auto corpus = training_corpus(world, config_.lm.fact_sequences);
    const auto curriculum =
        config_.lm.patch_curriculum ? patch_curriculum(world) : PatchCurriculum{};
    LmTrainLog log;
    const auto epochs = config_.lm.train.epochs;
    auto lm = cdlab::train_lm(mc, corpus, config_.lm.train, &log,
                       [&](std::size_t e, double loss) {
                         if (e % 10 == 0 || e + 1 == epochs) {
                           note("[train-lm] epoch " + std::to_string(e) + " loss " +
                                format_double(loss));
                         }
                       },
                       curriculum);
    lm.save(dir / "model.ckpt");
    std::ostringstream curve;
    curve << "epoch\tloss\n";
    for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
      curve << e << '\t' << format_double(log.epoch_loss[e]) << '\n';
    }
    write_file_atomic(dir / "curve.tsv", curve.str());

    std::vector<CityFact> kept;
    try {
      kept = filter_known(lm, world);
    } catch (const PipelineError& e) {
      throw PipelineError(std::string("train-lm: ") + e.what());
    }
    std::ostringstream filt;
    filt << "# kept " << kept.size() << " of " << world.facts.size() << "\n";
    filt << "city\tcountry\tcontinent\tkept\n";
    for (const auto& f : world.facts) {
      const bool k = std::find(kept.begin(), kept.end(), f) != kept.end();
      filt << world.vocab.word(f.city) << '\t' << world.vocab.word(f.country) << '\t'
           << world.vocab.word(f.continent) << '\t' << (k ? 1 : 0) << '\n';
    }
    write_file_atomic(dir / "filter.tsv", filt.str());
    finish_stage(dir, "train-lm", lm_hash(), {"model.ckpt", "curve.tsv", "filter.tsv"});
    note("[train-lm] kept " + std::to_string(kept.size()) + " of " +
         std::to_string(world.facts.size()) + " cities -> " + dir.string());
  }

  const auto ddir = data_dir();
  if (complete(ddir, data_hash())) {
    note("[train-lm] dataset up to date: " + ddir.string());
    return dir;
  }
  const auto lm = ToyLM::load(dir / "model.ckpt");
  const auto kept = filter_known(lm, world);
  const auto split = split_examples(generate_examples(kept), config_.split_seed);
  write_dataset(ddir / "dataset.tsv", world.vocab, split);
  finish_stage(ddir, "dataset", data_hash(), {"dataset.tsv"});
  note("[train-lm] dataset " + std::to_string(split.train.size()) + "/" +
       std::to_string(split.val.size()) + "/" + std::to_string(split.test.size()) + " -> " +
       ddir.string());
  return dir;
}

fs::path Pipeline::train_sae(std::size_t layer, SaeVariant variant) {
  const auto name = std::string(variant_name(variant));
  const auto dir = sae_dir(layer, variant);
  const auto hash = sae_hash(layer, variant);
  if (complete(dir, hash)) {
    note("[train-sae] layer " + std::to_string(layer) + " " + name + " up to date: " +
         dir.string());
    return dir;
  }
  if (layer >= config_.lm.model.n_layers) {
    throw ConfigError("train-sae: layer " + std::to_string(layer) + " outside the model");
  }
  const auto world = load_world();
  require(lm_dir(), lm_hash(), "trained language model", "train-lm");
  const auto lm = ToyLM::load(lm_dir() / "model.ckpt");
  const auto corpus = build_activation_corpus(lm, world, layer);
  auto sc = config_.sae;
  sc.layer = layer;
  sc.variant = variant;
  SaeTrainLog log;
  const auto sae = cdlab::train_sae(sc, corpus, &lm, &log);
  sae.save(dir / "sae.ckpt");
  std::ostringstream curve;
  curve << "# initial loss " << format_double(log.initial_loss) << "\n";
  curve << "epoch\tloss\n";
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
    curve << e << '\t' << format_double(log.epoch_loss[e]) << '\n';
  }
  write_file_atomic(dir / "curve.tsv", curve.str());
  finish_stage(dir, "train-sae", hash, {"sae.ckpt", "curve.tsv"});
  note("[train-sae] layer " + std::to_string(layer) + " " + name + " loss " +
       format_double(log.initial_loss) + " -> " +
       format_double(log.epoch_loss.empty() ? log.initial_loss : log.epoch_loss.back()) +
       " -> " + dir.string());
  return dir;
}

fs::path Pipeline::learn_mask(std::size_t layer, const std::string& space_name, Attribute attr) {
  const auto space = canonical_space(space_name);
  const auto dir = mask_dir(layer, space, attr);
  const auto hash = mask_hash(layer, space, attr);
  const std::string cell = "layer " + std::to_string(layer) + " " + space + " " +
                           std::string(attribute_name(attr));
  if (complete(dir, hash)) {
    note("[learn-mask] " + cell + " up to date: " + dir.string());
    return dir;
  }
  if (layer >= config_.lm.model.n_layers) {
    throw ConfigError("learn-mask: layer " + std::to_string(layer) + " outside the model");
  }
  if (cell_absent(layer, space)) {
    throw ConfigError("learn-mask: " + space + " has no downstream layers at layer " +
                      std::to_string(layer));
  }
  const auto world = load_world();
  require(lm_dir(), lm_hash(), "trained language model", "train-lm");
  require(data_dir(), data_hash(), "intervention dataset", "train-lm");
  const auto lm = ToyLM::load(lm_dir() / "model.ckpt");
  const auto split = read_dataset(data_dir() / "dataset.tsv", world.vocab);
  const auto d = lm.config().d_model;

  auto fspace = FeatureSpace::neurons(d);
  auto cfg = config_.dbm.train;
  cfg.target = attr;
  if (space == "das") {
    fspace = FeatureSpace::das(OrthParam::random(d, config_.dbm.das_seed, config_.dbm.das_init_scale));
    cfg.joint_das = true;
  } else if (auto v = space_variant(space)) {
    const auto sdir = sae_dir(layer, *v);
    require(sdir, sae_hash(layer, *v), "SAE for " + space + " at layer " + std::to_string(layer),
            "train-sae --layer " + std::to_string(layer) + " --variant " +
                std::string(variant_name(*v)));
    fspace = FeatureSpace::sae(std::make_shared<Sae>(Sae::load(sdir / "sae.ckpt")));
  }

  const LmBackend backend(lm, world, layer);
  const auto result = train_mask(backend, fspace, split.train, split.val, cfg,
                                 [&](const MaskCurvePoint& p) {
                                   if (p.epoch % 5 == 4 || p.epoch + 1 == cfg.epochs) {
                                     note("[learn-mask] " + cell + " epoch " +
                                          std::to_string(p.epoch) + " loss " +
                                          format_double(p.train_loss));
                                   }
                                 });
  const auto sel = binarize(result.mask);
  MetaList meta = {{"layer", std::to_string(layer)},
                   {"space", space},
                   {"attr", std::string(attribute_name(attr))},
                   {"config_hash", config_hash()},
                   {"mask_seed", std::to_string(cfg.seed)},
                   {"das_seed", std::to_string(config_.dbm.das_seed)},
                   {"split_seed", std::to_string(config_.split_seed)}};
  write_mask(dir / "mask.ckpt", result.mask, meta,
             space == "das" ? &fspace.orth() : nullptr);
  std::ostringstream header;
  header << "layer " << layer << " space " << space << " attr " << attribute_name(attr) << "\n"
         << "config " << config_hash();
  write_file_atomic(dir / "mask.txt", mask_index_text(sel, header.str()));
  write_file_atomic(dir / "curve.tsv", curve_tsv(result.curve));
  finish_stage(dir, "learn-mask", hash, {"mask.ckpt", "mask.txt", "curve.tsv"});
  std::size_t n = 0;
  for (bool b : sel) n += b;
  note("[learn-mask] " + cell + " selected " + std::to_string(n) + " of " +
       std::to_string(sel.size()) + " -> " + dir.string());
  return dir;
}

fs::path Pipeline::evaluate() {
  const auto dir = eval_dir();
  const auto hash = eval_hash();
  if (complete(dir, hash)) {
    note("[evaluate] up to date: " + dir.string());
    return dir;
  }
  const auto world = load_world();
  require(lm_dir(), lm_hash(), "trained language model", "train-lm");
  require(data_dir(), data_hash(), "intervention dataset", "train-lm");
  for (auto layer : config_.layers) {
    for (const auto& space : config_.spaces) {
      if (cell_absent(layer, space)) continue;
      for (auto attr : kAttributes) {
        require(mask_dir(layer, space, attr), mask_hash(layer, space, attr),
                "mask for layer " + std::to_string(layer) + " " + space + " " +
                    std::string(attribute_name(attr)),
                "learn-mask --layer " + std::to_string(layer) + " --space " + space +
                    " --attr " + std::string(attribute_name(attr)));
      }
    }
  }
  const auto lm = ToyLM::load(lm_dir() / "model.ckpt");
  const auto split = read_dataset(data_dir() / "dataset.tsv", world.vocab);
  const auto d = lm.config().d_model;
  InterchangeOptions opts;
  opts.error_restoration = config_.error_restoration;

  std::vector<EvalReport> reports;
  std::vector<SweepCell> absent;
  for (auto layer : config_.layers) {
    const LmBackend backend(lm, world, layer);
    for (const auto& space : config_.spaces) {
      if (cell_absent(layer, space)) {
        for (auto attr : kAttributes) absent.push_back({layer, space, attr});
        continue;
      }
      std::shared_ptr<const Sae> sae;
      if (auto v = space_variant(space)) {
        sae = std::make_shared<Sae>(Sae::load(sae_dir(layer, *v) / "sae.ckpt"));
      }
      for (auto attr : kAttributes) {
        const auto loaded = read_mask(mask_dir(layer, space, attr) / "mask.ckpt");
        auto fspace = FeatureSpace::neurons(d);
        if (space == "das") {
          if (!loaded.das) throw FormatError("evaluate: das mask without a rotation");
          fspace = FeatureSpace::das(*loaded.das);
        } else if (sae) {
          fspace = FeatureSpace::sae(sae);
        }
        auto r = evaluate_cell(backend, fspace, binarize(loaded.mask), split.test, attr, layer,
                               opts);
        note("[evaluate] layer " + std::to_string(layer) + " " + space + " " +
             std::string(attribute_name(attr)) + " disentangle " + format_double(r.disentangle));
        reports.push_back(std::move(r));
      }
    }
  }
  write_file_atomic(dir / "reports.jsonl", reports_to_jsonl(reports));
  write_file_atomic(dir / "sweep.tsv", sweep_tsv(reports, absent));
  finish_stage(dir, "evaluate", hash, {"reports.jsonl", "sweep.tsv"});
  note("[evaluate] " + std::to_string(reports.size()) + " reports -> " + dir.string());
  return dir;
}

fs::path Pipeline::report() {
  const auto dir = eval_dir();
  require(dir, eval_hash(), "evaluation reports", "evaluate");
  const auto path = dir / "report.md";
  const auto reports = reports_from_jsonl(read_file(dir / "reports.jsonl"));
  std::ostringstream out;
  out << "# Feature-space disentanglement report\n\n";
  out << "config " << config_hash() << "; seeds: world " << config_.world.seed << ", model "
      << config_.lm.model.seed << ", lm-train " << config_.lm.train.seed << ", split "
      << config_.split_seed << ", sae " << config_.sae.seed << ", mask "
      << config_.dbm.train.seed << ", das " << config_.dbm.das_seed << "\n\n";
  for (auto layer : config_.layers) {
    std::vector<std::string> order;
    for (const auto& s : config_.spaces) {
      if (!cell_absent(layer, s)) order.push_back(s);
    }
    out << "```\n" << render_layer_table(reports, layer, order) << "```\n\n";
  }
  out << "## Layer sweep\n\n```\n" << read_file(dir / "sweep.tsv") << "```\n";
  const auto text = out.str();
  if (fs::exists(path) && read_file(path) == text) {
    note("[report] up to date: " + path.string());
    return path;
  }
  write_file_atomic(path, text);
  record(dir, "report", {"report.md"});
  note("[report] -> " + path.string());
  return path;
}

fs::path Pipeline::run_all() {
  worldgen();
  train_lm();
  for (auto layer : config_.layers) {
    for (const auto& space : config_.spaces) {
      if (cell_absent(layer, space)) {
        note("[run] layer " + std::to_string(layer) + " " + space + ": absent");
        continue;
      }
      if (auto v = space_variant(space)) train_sae(layer, *v);
      for (auto attr : kAttributes) learn_mask(layer, space, attr);
    }
  }
  const auto dir = evaluate();
  report();
  return dir;
}

}  // namespace cdlab
