#include <CLI11.hpp>
#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "cdlab/config.hpp"
#include "cdlab/errors.hpp"
#include "cdlab/pipeline.hpp"

namespace {

struct Globals {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
};

cdlab::Pipeline make_pipeline(const Globals& g) {
  auto config = g.config_path.empty() ? cdlab::ExperimentConfig{} : cdlab::load_config(g.config_path);
  if (g.seed) cdlab::apply_seed_override(config, *g.seed);
  cdlab::Pipeline::Options opts;
  opts.out = g.out.empty() ? config.out : g.out;
  opts.invocation = "cdlab";
  if (!g.config_path.empty()) opts.invocation += " --config " + g.config_path;
  if (!g.out.empty()) opts.invocation += " --out " + g.out;
  if (g.seed) opts.invocation += " --seed-override " + std::to_string(*g.seed);
  opts.log = &std::cerr;
  return cdlab::Pipeline(std::move(config), opts);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Feature-space disentanglement experiments on a toy language model"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config_path, "experiment config (JSON)");
  app.add_option("--out", g.out, "output directory (overrides the config's \"out\")");
  auto* seed_opt = app.add_option("--seed-override", seed, "replace every seed with N + stage offset");

  auto* worldgen = app.add_subcommand("worldgen", "generate the synthetic world");
  auto* train_lm = app.add_subcommand("train-lm", "train the toy LM, filter cities, split the dataset");
  auto* train_sae = app.add_subcommand("train-sae", "train one SAE variant at one layer");
  std::size_t sae_layer = 0;
  std::string variant;
  train_sae->add_option("--layer", sae_layer)->required();
  train_sae->add_option("--variant", variant, "standard, topk, e2e or e2e_ds")->required();
  auto* learn_mask = app.add_subcommand("learn-mask", "learn a binary feature mask");
  std::size_t mask_layer = 0;
  std::string space, attr;
  learn_mask->add_option("--layer", mask_layer)->required();
  learn_mask->add_option("--space", space, "neurons, das or sae:<variant>")->required();
  learn_mask->add_option("--attr", attr, "country or continent")->required();
  auto* evaluate = app.add_subcommand("evaluate", "score every (layer, space, attr) cell");
  auto* report = app.add_subcommand("report", "render the summary tables");
  auto* run = app.add_subcommand("run", "run every stage, skipping completed ones");
  auto* show = app.add_subcommand("show-config", "print the effective config");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) g.seed = seed;

  std::string stage = app.get_subcommands().front()->get_name();
  try {
    auto p = make_pipeline(g);
    if (*show) {
      std::cout << cdlab::config_to_json(p.config());
    } else if (*worldgen) {
      std::cout << p.worldgen().string() << "\n";
    } else if (*train_lm) {
      std::cout << p.train_lm().string() << "\n";
    } else if (*train_sae) {
      std::cout << p.train_sae(sae_layer, cdlab::parse_variant(variant)).string() << "\n";
    } else if (*learn_mask) {
      std::cout << p.learn_mask(mask_layer, space, cdlab::parse_attribute(attr)).string() << "\n";
    } else if (*evaluate) {
      std::cout << p.evaluate().string() << "\n";
    } else if (*report) {
      std::cout << p.report().string() << "\n";
    } else if (*run) {
      p.run_all();
      std::cout << p.report().string() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "cdlab " << stage << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
