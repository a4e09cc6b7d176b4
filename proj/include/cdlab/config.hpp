#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cdlab/dbm.hpp"
#include "cdlab/model.hpp"
#include "cdlab/sae.hpp"
#include "cdlab/world.hpp"

namespace cdlab {

// One JSON file per experiment. Every key is optional; missing keys take the
// defaults below. Unknown keys are rejected so typos do not silently fall
// back to defaults. See docs/FORMATS.md for the key list.
struct LmSection {
  ModelConfig model;  // vocab_size is derived from the world
  LmTrainConfig train;
  bool fact_sequences = true;
  bool patch_curriculum = true;
};

struct DbmSection {
  DbmTrainConfig train;  // target and joint_das are set per cell
  double das_init_scale = 0.1;
  std::uint64_t das_seed = 9;
};

struct ExperimentConfig {
  WorldParams world;
  LmSection lm;
  std::uint64_t split_seed = 6;
  std::vector<std::size_t> layers = {0, 1, 2};
  std::vector<std::string> spaces = {"neurons",   "das",     "sae:standard",
                                     "sae:topk",  "sae:e2e", "sae:e2e_ds"};
  SaeTrainConfig sae;  // layer and variant are set per cell
  DbmSection dbm;
  bool error_restoration = false;
  std::string out = "runs/default";

  void validate() const;
};

ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);

// Replaces every seed with base + a fixed per-stage offset.
void apply_seed_override(ExperimentConfig& config, std::uint64_t base);

// Accepts "neurons", "das", "sae:<variant>" or a bare variant name and
// returns the canonical form.
std::string canonical_space(const std::string& name);
std::optional<SaeVariant> space_variant(const std::string& canonical);

}  // namespace cdlab
