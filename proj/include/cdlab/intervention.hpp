#pragma once

#include <cstddef>
#include <map>
#include <utility>
#include <vector>

#include "cdlab/feature_space.hpp"
#include "cdlab/model.hpp"
#include "cdlab/tensor.hpp"
#include "cdlab/world.hpp"

namespace cdlab {

// What an interchange intervention needs from the model under study: the
// hidden vector at the hook for a (city, queried attribute) prompt, and the
// final-position logits of that prompt with the hook vector replaced.
class InterventionBackend {
 public:
  virtual ~InterventionBackend() = default;

  virtual std::size_t d_model() const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual Tensor hidden(TokenId city, Attribute queried) const = 0;
  // Differentiable in h_new.
  virtual Tensor patched_logits(TokenId base_city, Attribute queried, const Tensor& h_new) const = 0;
  virtual Tensor clean_logits(TokenId city, Attribute queried) const = 0;
  // Ground-truth attribute value of a city.
  virtual TokenId answer(TokenId city, Attribute queried) const = 0;
};

// Toy LM hooked at (layer, query-city position). Clean runs of every
// (city, prompt) are cached up front.
class LmBackend final : public InterventionBackend {
 public:
  LmBackend(const ToyLM& model, const World& world, std::size_t layer);

  std::size_t d_model() const override { return model_.config().d_model; }
  std::size_t vocab_size() const override { return model_.config().vocab_size; }
  Tensor hidden(TokenId city, Attribute queried) const override;
  Tensor patched_logits(TokenId base_city, Attribute queried, const Tensor& h_new) const override;
  Tensor clean_logits(TokenId city, Attribute queried) const override;
  TokenId answer(TokenId city, Attribute queried) const override;

  std::size_t layer() const { return layer_; }
  const ToyLM& model() const { return model_; }

 private:
  const PromptCache& cache(TokenId city, Attribute queried) const;

  const ToyLM& model_;
  std::size_t layer_;
  std::map<std::pair<TokenId, Attribute>, PromptCache> caches_;
  std::map<TokenId, CityFact> facts_;
};

// Selection over feature indices; true = take the source value.
using Selection = std::vector<bool>;

struct InterchangeOptions {
  // Adds the base reconstruction error (h_b - x̂_b) back after mixing.
  bool error_restoration = false;
};

// Mixes base and source features of a batch of records, gate = per-feature
// weight of the source value. Rows of h_base/h_source are [N x d_model];
// returns the patched hidden vectors [N x d_model].
Tensor mix_hidden(const FeatureMap& map, const Tensor& h_base, const Tensor& h_source,
                  const Tensor& gate, const InterchangeOptions& options = {});

Tensor selection_gate(const Selection& selection);

// Final-position logits of the base prompt with the selected features of the
// source swapped in. Base and source always share the queried template.
Tensor interchange(const InterventionBackend& backend, const FeatureSpace& space,
                   const Selection& selection, TokenId base_city, TokenId source_city,
                   Attribute queried, const InterchangeOptions& options = {});

// Stacks backend.hidden over records' base or source cities, [N x d_model].
Tensor stack_hidden(const InterventionBackend& backend,
                    const std::vector<InterventionExample>& records, bool source);

std::size_t argmax(const Tensor& logits);

// Greedy answers of every record under the gate (0/1 for hard selections),
// without recording gradients.
std::vector<TokenId> predict(const InterventionBackend& backend, const FeatureMap& map,
                             const Tensor& gate, const std::vector<InterventionExample>& records,
                             const InterchangeOptions& options = {});

// Fraction of records whose prediction equals the record label.
double label_accuracy(const std::vector<TokenId>& predictions,
                      const std::vector<InterventionExample>& records);

}  // namespace cdlab
