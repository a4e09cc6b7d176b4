#include "cdlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cdlab/errors.hpp"
#include "cdlab/ops.hpp"

namespace cdlab {

namespace {

Tensor reduce_to_scalar(const Tensor& y) {
  if (y.numel() == 1) return y;
  std::vector<double> w(y.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.7 * static_cast<double>(i) + 0.3);
  return ops::sum(ops::mul(y, Tensor(y.shape(), std::move(w))));
}

}  // namespace

double finite_diff_check(const TensorFn& fn, const std::vector<Tensor>& inputs, double epsilon) {
  if (!(epsilon >= 1e-6 && epsilon <= 1e-3)) {
    throw ContractError("finite_diff_check: epsilon " + std::to_string(epsilon) +
                        " outside [1e-6, 1e-3]");
  }
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) leaves.push_back(Tensor(in.shape(), in.values(), true));

  backward(reduce_to_scalar(fn(leaves)));

  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& leaf : leaves) {
    const auto analytic = leaf.grad();
    auto data = leaf.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + epsilon;
      const double up = reduce_to_scalar(fn(leaves)).item();
      data[i] = saved - epsilon;
      const double down = reduce_to_scalar(fn(leaves)).item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace cdlab
