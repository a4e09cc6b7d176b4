#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "cdlab/dbm.hpp"
#include "cdlab/feature_space.hpp"
#include "cdlab/intervention.hpp"
#include "cdlab/world.hpp"

namespace cdlab {

// Accuracies are percentages in [0, 100]; fractions are in [0, 1]. Nothing
// is rounded here; display_round is applied only when rendering.
struct EvalReport {
  std::size_t layer = 0;
  std::string space;
  Attribute target = Attribute::Country;
  double intervened_acc = 0.0;  // queried == target, scored against the source label
  double preserved_acc = 0.0;   // queried != target, scored against the base label
  double disentangle = 0.0;
  double inactive_frac = 0.0;
  double intervened_frac = 0.0;
  double active_nonintervened_frac = 0.0;
  double recon_loss = 0.0;
  double recon_knowledge = 0.0;
  double empty_baseline = 0.0;  // disentangle with nothing selected
  std::size_t n_records = 0;

  bool operator==(const EvalReport&) const = default;
};

double disentangle_score(double intervened_acc, double preserved_acc);
// Round half up to an integer.
long display_round(double value);

struct SideAccuracy {
  double intervened = 0.0;
  double preserved = 0.0;
  double disentangle() const { return disentangle_score(intervened, preserved); }
};

// Splits predictions of target-attr records into the intervened side and the
// preserved side. Throws ContractError if either side is empty.
SideAccuracy score_sides(const std::vector<TokenId>& predictions,
                         const std::vector<InterventionExample>& records);

SideAccuracy evaluate_selection(const InterventionBackend& backend, const FeatureSpace& space,
                                const Selection& selection,
                                const std::vector<InterventionExample>& records, Attribute target,
                                const InterchangeOptions& options = {});

struct Partition {
  double inactive = 0.0;
  double intervened = 0.0;
  double active_nonintervened = 0.0;
  double sum() const { return inactive + intervened + active_nonintervened; }
};

// active[i]: feature i was nonzero somewhere. Inactive = never active and not selected.
Partition partition_from_activity(const std::vector<bool>& active, const Selection& selection);

inline constexpr double kActiveThreshold = 1e-9;

// Activity over every base and source hidden vector of the records.
std::vector<bool> feature_activity(const InterventionBackend& backend, const FeatureSpace& space,
                                   const std::vector<InterventionExample>& records);

Partition sparsity_partition(const InterventionBackend& backend, const FeatureSpace& space,
                             const Selection& selection,
                             const std::vector<InterventionExample>& records);

struct ReconReport {
  double loss = 0.0;       // mean over prompts of the squared L2 error
  double knowledge = 0.0;  // % of base prompts still answered correctly
  std::size_t n_prompts = 0;
};

// Distinct (base city, queried attribute) prompts of the records.
std::vector<std::pair<TokenId, Attribute>> base_prompts(
    const std::vector<InterventionExample>& records);

ReconReport reconstruction_report(const InterventionBackend& backend, const FeatureSpace& space,
                                  const std::vector<std::pair<TokenId, Attribute>>& prompts,
                                  const InterchangeOptions& options = {});

double empty_intervention_baseline(const InterventionBackend& backend, const FeatureSpace& space,
                                   const std::vector<InterventionExample>& records,
                                   Attribute target, const InterchangeOptions& options = {});

// Every Figure-1b quantity of one (layer, space, target) cell on the test split.
EvalReport evaluate_cell(const InterventionBackend& backend, const FeatureSpace& space,
                         const Selection& selection, const std::vector<InterventionExample>& test,
                         Attribute target, std::size_t layer,
                         const InterchangeOptions& options = {});

// One JSON object per line.
std::string reports_to_jsonl(const std::vector<EvalReport>& reports);
std::vector<EvalReport> reports_from_jsonl(const std::string& text);

// Plot data behind a disentangle-across-layers chart: one row per
// (layer, space, attr). Cells missing from `reports` but listed in `absent`
// appear with "absent" in place of the numbers.
struct SweepCell {
  std::size_t layer;
  std::string space;
  Attribute target;
};
std::string sweep_tsv(const std::vector<EvalReport>& reports, const std::vector<SweepCell>& absent);

// Figure-1b-style table for one layer: a country-intervened block and a
// continent-intervened block, one column per space.
std::string render_layer_table(const std::vector<EvalReport>& reports, std::size_t layer,
                               const std::vector<std::string>& space_order);

}  // namespace cdlab
