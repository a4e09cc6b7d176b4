#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cdlab/model.hpp"
#include "cdlab/tensor.hpp"
#include "cdlab/world.hpp"

namespace cdlab {

enum class SaeVariant { Standard, TopK, E2E, E2EDs };

std::string_view variant_name(SaeVariant v);
SaeVariant parse_variant(std::string_view name);
bool is_end_to_end(SaeVariant v);

// x̄ = x - b_x, f = ReLU(W_e x̄ + b_e) (top-k of that for TopK), x̂ = W_d f + b_d.
// W_e is [D x d_model], W_d is [d_model x D] with unit-norm columns.
struct Sae {
  SaeVariant variant = SaeVariant::Standard;
  std::size_t k = 0;  // TopK only
  double lambda = 0.0;
  std::size_t layer = 0;
  Tensor W_e, b_e, W_d, b_d, b_x;

  std::size_t d_model() const { return W_d.rows(); }
  std::size_t dict_size() const { return W_d.cols(); }

  // h is [d_model] or [N x d_model]; results keep the same rank.
  Tensor encode(const Tensor& x) const;
  Tensor decode(const Tensor& f) const;
  Tensor reconstruct(const Tensor& x) const { return decode(encode(x)); }

  std::vector<Tensor> parameters() const { return {W_e, b_e, W_d, b_d, b_x}; }
  void set_trainable(bool on);
  void normalize_decoder();

  void save(const std::filesystem::path& path) const;
  static Sae load(const std::filesystem::path& path);
};

// Random unit-norm decoder columns, tied encoder init (W_e = W_dᵀ), both
// biases at the data mean when one is given.
Sae init_sae(std::size_t d_model, std::size_t dict_size, SaeVariant variant, std::size_t k,
             double lambda, std::uint64_t seed, const Tensor* data_mean = nullptr);

// Residual vectors at one layer, each tied to the prompt position it came
// from so end-to-end losses can patch the reconstruction back in.
struct ActivationCorpus {
  std::size_t layer = 0;
  std::vector<PromptCache> caches;
  std::vector<std::pair<std::size_t, std::size_t>> sites;  // (cache, position) per row
  Tensor activations;                                    // [N x d_model]

  std::size_t size() const { return activations.rows(); }
  bool has_sites() const { return !sites.empty(); }
};

// Query-city position of every prompt of every city, plus the in-context
// exemplar city positions (identical across cities, so taken once per template).
ActivationCorpus build_activation_corpus(const ToyLM& model, const World& world,
                                         std::size_t layer);
// Plain data matrix; only the local variants can train on it.
ActivationCorpus matrix_corpus(Tensor activations);

struct SaeLoss {
  Tensor total;
  Tensor mse;         // reconstruction, sum over dims, mean over rows
  Tensor sparsity;    // λ·L1, zero for TopK
  Tensor kl;          // end-to-end logit term
  Tensor downstream;  // e2e_ds only: mean over later layers of the patched-site MSE
};

struct SaeLossOptions {
  bool kl_reverse = false;  // false: KL(orig || patched)
};

SaeLoss sae_loss(const Sae& sae, const ToyLM* model, const ActivationCorpus& corpus,
                 std::span<const std::size_t> rows, const SaeLossOptions& options = {});

struct SaeTrainConfig {
  std::size_t layer = 0;
  SaeVariant variant = SaeVariant::Standard;
  std::size_t dict_mult = 8;
  std::size_t k = 16;
  double lambda = 0.3;
  double lr = 1e-3;
  std::size_t epochs = 300;
  std::size_t batch = 16;
  bool kl_reverse = false;
  std::uint64_t seed = 4;
};

struct SaeTrainLog {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;
};

// Throws ConfigError for end-to-end variants without a model or sites, and for
// e2e_ds at the last layer; TrainingError on a non-finite loss.
Sae train_sae(const SaeTrainConfig& config, const ActivationCorpus& corpus,
              const ToyLM* model = nullptr, SaeTrainLog* log = nullptr);

}  // namespace cdlab
