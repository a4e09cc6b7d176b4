#include "cdlab/feature_space.hpp"

#include <cmath>

#include "cdlab/errors.hpp"
#include "cdlab/ops.hpp"
#include "cdlab/rng.hpp"

namespace cdlab {

Tensor cayley(const Tensor& A) {
  if (A.ndim() != 2 || A.rows() != A.cols()) {
    throw DimensionError("cayley: expected a square matrix, got " + shape_str(A.shape()));
  }
  const auto d = A.rows();
  auto S = ops::scale(ops::sub(A, ops::transpose(A)), 0.5);
  auto I = Tensor::eye(d);
  // S commutes with (I + S), so (I - S)(I + S)^-1 = (I + S)^-1 (I - S).
  return ops::solve(ops::add(I, S), ops::sub(I, S));
}

OrthParam OrthParam::identity(std::size_t d) { return {Tensor::zeros({d, d})}; }

OrthParam OrthParam::random(std::size_t d, std::uint64_t seed, double scale) {
  Rng rng(seed);
  std::vector<double> v(d * d);
  for (auto& x : v) x = scale * rng.normal();
  return {Tensor({d, d}, std::move(v))};
}

FeatureMap::FeatureMap(SpaceKind kind, std::size_t d_model, Tensor rotation, const Sae* sae)
    : kind_(kind), d_model_(d_model), rotation_(std::move(rotation)), sae_(sae) {}

Tensor FeatureMap::to_features(const Tensor& h) const {
  if (h.cols() != d_model_) {
    throw DimensionError("to_features: input " + shape_str(h.shape()) + " for d_model " +
                         std::to_string(d_model_));
  }
  switch (kind_) {
    case SpaceKind::Neurons: return h;
    case SpaceKind::Das: {
      // f = R h, i.e. rows times Rᵀ
      if (h.ndim() == 1) {
        return ops::reshape(ops::matmul(rotation_, ops::reshape(h, {d_model_, 1})), {d_model_});
      }
      return ops::matmul(h, ops::transpose(rotation_));
    }
    case SpaceKind::Sae: return sae_->encode(h);
  }
  return h;
}

Tensor FeatureMap::from_features(const Tensor& f) const {
  switch (kind_) {
    case SpaceKind::Neurons:
      if (f.cols() != d_model_) {
        throw DimensionError("from_features: input " + shape_str(f.shape()) + " for d_model " +
                             std::to_string(d_model_));
      }
      return f;
    case SpaceKind::Das:
      if (f.cols() != d_model_) {
        throw DimensionError("from_features: input " + shape_str(f.shape()) + " for d_model " +
                             std::to_string(d_model_));
      }
      // h = Rᵀ f, i.e. rows times R
      if (f.ndim() == 1) {
        return ops::reshape(ops::matmul(ops::reshape(f, {1, d_model_}), rotation_), {d_model_});
      }
      return ops::matmul(f, rotation_);
    case SpaceKind::Sae: return sae_->decode(f);
  }
  return f;
}

FeatureSpace FeatureSpace::neurons(std::size_t d_model) {
  return FeatureSpace(SpaceKind::Neurons, d_model);
}

FeatureSpace FeatureSpace::das(OrthParam param) {
  if (param.A.ndim() != 2 || param.A.rows() != param.A.cols()) {
    throw DimensionError("DAS parameter must be square, got " + shape_str(param.A.shape()));
  }
  FeatureSpace s(SpaceKind::Das, param.A.rows());
  s.orth_ = std::move(param);
  return s;
}

FeatureSpace FeatureSpace::sae(std::shared_ptr<const Sae> sae) {
  if (!sae) throw ContractError("FeatureSpace::sae: null SAE");
  FeatureSpace s(SpaceKind::Sae, sae->d_model());
  s.sae_ = std::move(sae);
  return s;
}

std::size_t FeatureSpace::feature_dim() const {
  return kind_ == SpaceKind::Sae ? sae_->dict_size() : d_model_;
}

std::string FeatureSpace::name() const {
  switch (kind_) {
    case SpaceKind::Neurons: return "neurons";
    case SpaceKind::Das: return "das";
    case SpaceKind::Sae: return "sae:" + std::string(variant_name(sae_->variant));
  }
  return "?";
}

FeatureMap FeatureSpace::bind() const {
  Tensor R;
  if (kind_ == SpaceKind::Das) R = orth_.rotation();
  return FeatureMap(kind_, d_model_, R, sae_.get());
}

Tensor FeatureSpace::round_trip(const Tensor& h) const {
  auto m = bind();
  return m.from_features(m.to_features(h));
}

OrthParam& FeatureSpace::orth() {
  if (kind_ != SpaceKind::Das) throw ContractError("orth(): " + name() + " is not a DAS space");
  return orth_;
}

const OrthParam& FeatureSpace::orth() const {
  if (kind_ != SpaceKind::Das) throw ContractError("orth(): " + name() + " is not a DAS space");
  return orth_;
}

const Sae& FeatureSpace::sae_params() const {
  if (kind_ != SpaceKind::Sae) throw ContractError(name() + " is not an SAE space");
  return *sae_;
}

double orthogonality_error(const Tensor& R) {
  NoGradGuard no_grad;
  auto P = ops::matmul(R, ops::transpose(R));
  const auto d = R.rows();
  double worst = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      worst = std::max(worst, std::abs(P.at(i, j) - (i == j ? 1.0 : 0.0)));
    }
  }
  return worst;
}

}  // namespace cdlab
