#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "cdlab/config.hpp"
#include "cdlab/evaluation.hpp"
#include "cdlab/world.hpp"

namespace cdlab {

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

inline constexpr int kManifestVersion = 1;

// Output tree, every stage content-addressed by the hash of the config
// sections it depends on plus the hashes of its inputs:
//
//   <out>/manifest.json                    stage log with timestamps
//   <out>/world/<h>/world.tsv
//   <out>/lm/<h>/model.ckpt, curve.tsv, filter.tsv
//   <out>/data/<h>/dataset.tsv
//   <out>/sae/<h>/sae.ckpt, curve.tsv
//   <out>/mask/<h>/mask.ckpt, mask.txt, curve.tsv
//   <out>/eval/<h>/reports.jsonl, sweep.tsv, report.md
//
// Each stage directory ends with stage.json, written last; a directory with a
// stage.json whose hash matches is complete and is not recomputed.
class Pipeline {
 public:
  struct Options {
    std::filesystem::path out;
    // Prefix of the command line a user would rerun, used in messages about
    // missing upstream artifacts ("cdlab --config x.json").
    std::string invocation = "cdlab";
    std::ostream* log = nullptr;
  };

  Pipeline(ExperimentConfig config, Options options);

  const ExperimentConfig& config() const { return config_; }
  std::string config_hash() const;

  std::filesystem::path worldgen();
  std::filesystem::path train_lm();
  std::filesystem::path train_sae(std::size_t layer, SaeVariant variant);
  std::filesystem::path learn_mask(std::size_t layer, const std::string& space, Attribute attr);
  std::filesystem::path evaluate();
  std::filesystem::path report();
  // Every stage in order, training whatever is missing. Returns the eval dir.
  std::filesystem::path run_all();

  // Stage directories for the current config, whether or not they exist.
  std::filesystem::path world_dir() const;
  std::filesystem::path lm_dir() const;
  std::filesystem::path data_dir() const;
  std::filesystem::path sae_dir(std::size_t layer, SaeVariant variant) const;
  std::filesystem::path mask_dir(std::size_t layer, const std::string& space,
                                 Attribute attr) const;
  std::filesystem::path eval_dir() const;

  // Cells the config can never fill (e2e_ds at the model's last layer).
  bool cell_absent(std::size_t layer, const std::string& space) const;

 private:
  std::string world_hash() const;
  std::string lm_hash() const;
  std::string data_hash() const;
  std::string sae_hash(std::size_t layer, SaeVariant variant) const;
  std::string mask_hash(std::size_t layer, const std::string& space, Attribute attr) const;
  std::string eval_hash() const;

  bool complete(const std::filesystem::path& dir, const std::string& hash) const;
  void finish_stage(const std::filesystem::path& dir, const std::string& stage,
                    const std::string& hash, const std::vector<std::string>& artifacts);
  void record(const std::filesystem::path& dir, const std::string& stage,
              const std::vector<std::string>& artifacts);
  void require(const std::filesystem::path& dir, const std::string& hash,
               const std::string& what, const std::string& command) const;
  void note(const std::string& line) const;

  World load_world() const;

  ExperimentConfig config_;
  Options opts_;
};

}  // namespace cdlab
