#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cdlab/feature_space.hpp"
#include "cdlab/intervention.hpp"
#include "cdlab/tensor.hpp"
#include "cdlab/world.hpp"

namespace cdlab {

// Gate σ(m/T) per feature; T falls linearly per epoch from t_start to t_end.
struct MaskParams {
  Tensor m;
  double t_start = 10.0;
  double t_end = 0.1;
  std::size_t epochs = 20;

  double temperature(std::size_t epoch) const;
  Tensor gate(double temperature) const;
  std::size_t size() const { return m.numel(); }
};

// f = (1 - σ(m/T)) ⊙ f_b + σ(m/T) ⊙ f_s
Tensor interpolate(const Tensor& f_b, const Tensor& f_s, const Tensor& m, double temperature);

// m > 0; zero counts as not selected.
Selection binarize(const Tensor& m);
inline Selection binarize(const MaskParams& mask) { return binarize(mask.m); }

// Fraction of gates σ(m/T) outside (lo, 1 - lo).
double snapped_fraction(const MaskParams& mask, double temperature, double lo = 0.01);

struct DbmTrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch = 16;
  double t_start = 10.0;
  double t_end = 0.1;
  // Initial mask logit for every feature. Negative, so features that never
  // receive gradient end up as "not intervened" once T is small.
  double mask_init = -0.5;
  Attribute target = Attribute::Country;
  bool joint_das = false;
  double das_lr = 1e-3;
  std::uint64_t seed = 5;
  InterchangeOptions interchange;
};

struct MaskCurvePoint {
  std::size_t epoch = 0;
  double temperature = 0.0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;  // hard mask; NaN without validation records
  double snapped = 0.0;       // at this epoch's temperature
  double selected = 0.0;      // fraction with m > 0
};

struct MaskResult {
  MaskParams mask;
  std::vector<MaskCurvePoint> curve;
};

// Trains the mask on the records of config.target (both queried attributes).
// With joint_das the space must be DAS; its rotation trains alongside the
// mask and is left updated in `space`.
MaskResult train_mask(const InterventionBackend& backend, FeatureSpace& space,
                      const std::vector<InterventionExample>& train,
                      const std::vector<InterventionExample>& val, const DbmTrainConfig& config,
                      const std::function<void(const MaskCurvePoint&)>& on_epoch = {});

// Mean cross-entropy of a batch under a soft gate; differentiable in the gate
// and, for DAS, in the rotation parameter.
Tensor intervention_loss(const InterventionBackend& backend, const FeatureMap& map,
                         const Tensor& gate, const std::vector<InterventionExample>& batch,
                         const InterchangeOptions& options = {});

// One selected feature index per line, '#' header lines first.
std::string mask_index_text(const Selection& selection, const std::string& header);

using MetaList = std::vector<std::pair<std::string, std::string>>;

// Binary checkpoint of kind "mask"; the trained rotation rides along when given.
void write_mask(const std::filesystem::path& path, const MaskParams& mask, const MetaList& meta,
                const OrthParam* das);
struct LoadedMask {
  MaskParams mask;
  MetaList meta;
  std::optional<OrthParam> das;
};
LoadedMask read_mask(const std::filesystem::path& path);

}  // namespace cdlab
