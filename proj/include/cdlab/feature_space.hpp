#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <string_view>

#include "cdlab/sae.hpp"
#include "cdlab/tensor.hpp"

namespace cdlab {

// R = (I - S)(I + S)^-1 with S = (A - Aᵀ)/2, computed as a linear solve.
// Throws NumericalError when I + S is too ill-conditioned to solve.
Tensor cayley(const Tensor& A);

// Unconstrained parameter of a rotation.
struct OrthParam {
  Tensor A;  // [d x d]

  static OrthParam identity(std::size_t d);
  static OrthParam random(std::size_t d, std::uint64_t seed, double scale = 1.0);
  Tensor rotation() const { return cayley(A); }
};

enum class SpaceKind { Neurons, Das, Sae };

// Coordinate map bound for one batch: the DAS rotation is computed once and
// stays on the tape, so gradients reach A when it is trainable.
class FeatureMap {
 public:
  FeatureMap(SpaceKind kind, std::size_t d_model, Tensor rotation, const Sae* sae);

  // h is [d_model] or [N x d_model].
  Tensor to_features(const Tensor& h) const;
  Tensor from_features(const Tensor& f) const;

 private:
  SpaceKind kind_;
  std::size_t d_model_;
  Tensor rotation_;
  const Sae* sae_;
};

class FeatureSpace {
 public:
  static FeatureSpace neurons(std::size_t d_model);
  static FeatureSpace das(OrthParam param);
  static FeatureSpace sae(std::shared_ptr<const Sae> sae);

  SpaceKind kind() const { return kind_; }
  std::size_t d_model() const { return d_model_; }
  std::size_t feature_dim() const;
  // "neurons", "das", "sae:<variant>"
  std::string name() const;

  FeatureMap bind() const;
  Tensor to_features(const Tensor& h) const { return bind().to_features(h); }
  Tensor from_features(const Tensor& f) const { return bind().from_features(f); }
  Tensor round_trip(const Tensor& h) const;

  // DAS only.
  OrthParam& orth();
  const OrthParam& orth() const;
  const Sae& sae_params() const;

 private:
  FeatureSpace(SpaceKind kind, std::size_t d_model) : kind_(kind), d_model_(d_model) {}

  SpaceKind kind_;
  std::size_t d_model_;
  OrthParam orth_;
  std::shared_ptr<const Sae> sae_;
};

// Max-abs entry of R Rᵀ - I.
double orthogonality_error(const Tensor& R);

}  // namespace cdlab
