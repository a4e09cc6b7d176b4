#include "cdlab/intervention.hpp"

#include <algorithm>

#include "cdlab/errors.hpp"
#include "cdlab/ops.hpp"

namespace cdlab {

LmBackend::LmBackend(const ToyLM& model, const World& world, std::size_t layer)
    : model_(model), layer_(layer) {
  if (layer >= model.config().n_layers) {
    throw ConfigError("hook layer " + std::to_string(layer) + " outside model with " +
                      std::to_string(model.config().n_layers) + " layers");
  }
  for (const auto& f : world.facts) {
    facts_.emplace(f.city, f);
    auto pp = build_prompt(world.vocab, f.city);
    for (auto a : kAttributes) caches_.emplace(std::pair{f.city, a}, model.prepare(pp.get(a)));
  }
}

const PromptCache& LmBackend::cache(TokenId city, Attribute queried) const {
  auto it = caches_.find({city, queried});
  if (it == caches_.end()) throw IndexError("no prompt cached for city token " + std::to_string(city));
  return it->second;
}

Tensor LmBackend::hidden(TokenId city, Attribute queried) const {
  const auto& c = cache(city, queried);
  return c.hidden(layer_, query_position(c.tokens));
}

Tensor LmBackend::patched_logits(TokenId base_city, Attribute queried, const Tensor& h_new) const {
  const auto& c = cache(base_city, queried);
  return model_.run_patched(c, {layer_, query_position(c.tokens)}, h_new).logits;
}

Tensor LmBackend::clean_logits(TokenId city, Attribute queried) const {
  return cache(city, queried).logits;
}

TokenId LmBackend::answer(TokenId city, Attribute queried) const {
  auto it = facts_.find(city);
  if (it == facts_.end()) throw IndexError("unknown city token " + std::to_string(city));
  return it->second.attribute(queried);
}

Tensor mix_hidden(const FeatureMap& map, const Tensor& h_base, const Tensor& h_source,
                  const Tensor& gate, const InterchangeOptions& options) {
  if (h_base.shape() != h_source.shape()) {
    throw DimensionError("mix_hidden: base " + shape_str(h_base.shape()) + " vs source " +
                         shape_str(h_source.shape()));
  }
  auto fb = map.to_features(h_base);
  auto fs = map.to_features(h_source);
  if (gate.numel() != fb.cols()) {
    throw DimensionError("mix_hidden: gate of " + std::to_string(gate.numel()) + " for " +
                         std::to_string(fb.cols()) + " features");
  }
  auto h = map.from_features(ops::lerp_gate(fb, fs, gate));
  if (options.error_restoration) {
    Tensor err;
    {
      NoGradGuard no_grad;
      err = ops::sub(h_base, map.from_features(fb));
    }
    h = ops::add(h, err);
  }
  return h;
}

Tensor selection_gate(const Selection& selection) {
  if (selection.empty()) throw ContractError("empty selection vector");
  std::vector<double> g(selection.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = selection[i] ? 1.0 : 0.0;
  return Tensor::vector(std::move(g));
}

Tensor interchange(const InterventionBackend& backend, const FeatureSpace& space,
                   const Selection& selection, TokenId base_city, TokenId source_city,
                   Attribute queried, const InterchangeOptions& options) {
  if (selection.size() != space.feature_dim()) {
    throw ContractError("interchange: selection of " + std::to_string(selection.size()) +
                        " for " + std::to_string(space.feature_dim()) + " features");
  }
  if (backend.d_model() != space.d_model()) {
    throw ContractError("interchange: space d_model " + std::to_string(space.d_model()) +
                        " vs backend " + std::to_string(backend.d_model()));
  }
  auto map = space.bind();
  auto h = mix_hidden(map, backend.hidden(base_city, queried), backend.hidden(source_city, queried),
                      selection_gate(selection), options);
  return backend.patched_logits(base_city, queried, h);
}

Tensor stack_hidden(const InterventionBackend& backend,
                    const std::vector<InterventionExample>& records, bool source) {
  const auto d = backend.d_model();
  std::vector<double> rows;
  rows.reserve(records.size() * d);
  for (const auto& r : records) {
    auto h = backend.hidden(source ? r.source_city : r.base_city, r.queried);
    rows.insert(rows.end(), h.values().begin(), h.values().end());
  }
  return Tensor({records.size(), d}, std::move(rows));
}

std::size_t argmax(const Tensor& logits) {
  const auto& v = logits.values();
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<TokenId> predict(const InterventionBackend& backend, const FeatureMap& map,
                             const Tensor& gate, const std::vector<InterventionExample>& records,
                             const InterchangeOptions& options) {
  NoGradGuard no_grad;
  std::vector<TokenId> out;
  if (records.empty()) return out;
  out.reserve(records.size());
  auto h = mix_hidden(map, stack_hidden(backend, records, false), stack_hidden(backend, records, true),
                      gate, options);
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.push_back(argmax(
        backend.patched_logits(records[i].base_city, records[i].queried, ops::select_row(h, i))));
  }
  return out;
}

double label_accuracy(const std::vector<TokenId>& predictions,
                      const std::vector<InterventionExample>& records) {
  if (records.empty()) throw ContractError("accuracy over an empty record set");
  if (predictions.size() != records.size()) {
    throw ContractError("label_accuracy: " + std::to_string(predictions.size()) +
                        " predictions for " + std::to_string(records.size()) + " records");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < records.size(); ++i) hits += predictions[i] == records[i].label;
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

}  // namespace cdlab
