#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdlab/tensor.hpp"
#include "cdlab/world.hpp"

namespace cdlab {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 256;
  std::size_t max_seq = 64;
  std::uint64_t seed = 2;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Residual stream after block `layer`, at sequence index `token_pos`.
struct HookPoint {
  std::size_t layer = 0;
  std::size_t token_pos = 0;
};

struct ReadResult {
  Tensor logits;  // [vocab]
  Tensor hidden;  // [d_model]
};

// Clean-run activations of one prompt. Patching at position p changes only
// positions >= p, so a patched run reuses the cached keys/values of earlier
// positions and recomputes just the suffix.
struct PromptCache {
  std::vector<TokenId> tokens;
  std::vector<Tensor> residual;  // per block, [T x d], after the block
  std::vector<Tensor> keys;      // per block, [T x d]
  std::vector<Tensor> values;    // per block, [T x d]
  Tensor logits;                 // final position, [vocab]

  std::size_t length() const { return tokens.size(); }
  Tensor hidden(std::size_t layer, std::size_t pos) const;
};

struct PatchedRun {
  Tensor logits;                 // final position, [vocab]
  std::vector<Tensor> downstream;  // residual at the patched position after each later block
};

class ToyLM {
 public:
  explicit ToyLM(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void set_trainable(bool on);
  std::size_t parameter_count() const;

  // All-position logits [T x vocab].
  Tensor forward_sequence(std::span<const TokenId> tokens) const;
  // Same, with the residual at `hook` replaced by h_new (full recompute).
  Tensor forward_sequence_patched(std::span<const TokenId> tokens, HookPoint hook,
                                  const Tensor& h_new) const;

  Tensor forward(std::span<const TokenId> tokens) const;
  ReadResult forward_with_read(std::span<const TokenId> tokens, HookPoint hook) const;
  Tensor forward_with_patch(std::span<const TokenId> tokens, HookPoint hook,
                            const Tensor& h_new) const;
  TokenId greedy_answer(std::span<const TokenId> tokens) const;

  PromptCache prepare(std::span<const TokenId> tokens) const;
  // Differentiable in h_new. collect_downstream fills PatchedRun::downstream.
  PatchedRun run_patched(const PromptCache& cache, HookPoint hook, const Tensor& h_new,
                         bool collect_downstream = false) const;

  void save(const std::filesystem::path& path) const;
  static ToyLM load(const std::filesystem::path& path);

 private:
  struct Block {
    Tensor ln1_g, ln1_b, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    Tensor ln2_g, ln2_b, w_in, b_in, w_out, b_out;
  };

  struct BlockOut {
    Tensor x, k, v;
  };

  void check_tokens(std::span<const TokenId> tokens) const;
  void check_hook(HookPoint hook, std::size_t length) const;
  Tensor embed(std::span<const TokenId> tokens) const;
  BlockOut block_forward(const Block& b, const Tensor& x, std::size_t offset,
                         const Tensor* k_prefix, const Tensor* v_prefix) const;
  Tensor head(const Tensor& last_row) const;

  ModelConfig config_;
  Tensor tok_emb_, pos_emb_;
  std::vector<Block> blocks_;
  Tensor lnf_g_, lnf_b_, w_u_;
};

struct LmTrainConfig {
  double lr = 3e-3;
  std::size_t epochs = 60;
  std::size_t batch = 8;
  std::uint64_t seed = 3;
  // Chance of adding one patched example per corpus sequence (see PatchCurriculum).
  double patch_rate = 0.5;
};

// Full-vector patch examples mixed into training: the query-city residual of
// a base prompt is replaced, after a random block below the last, by that of a
// source prompt of the same template, and the target is the source's answer.
// This makes later blocks read the city position instead of looking the fact
// up straight from the token embedding.
struct PatchCurriculum {
  struct Item {
    std::vector<TokenId> prompt;
    TokenId answer;
  };
  std::vector<std::vector<Item>> templates;  // items within one template share the layout

  bool empty() const { return templates.empty(); }
};

PatchCurriculum patch_curriculum(const World& world);

struct LmTrainLog {
  std::vector<double> epoch_loss;
};

// Next-token cross-entropy over every position; Adam(0.9, 0.999).
// Throws TrainingError naming the step on a non-finite loss.
ToyLM train_lm(const ModelConfig& config, const std::vector<std::vector<TokenId>>& corpus,
               const LmTrainConfig& hp, LmTrainLog* log = nullptr,
               const std::function<void(std::size_t, double)>& on_epoch = {},
               const PatchCurriculum& curriculum = {});

// Keeps the cities whose greedy answer is right on both prompts. Throws
// PipelineError when fewer than two survive.
std::vector<CityFact> filter_known(const ToyLM& model, const World& world);

}  // namespace cdlab
