#pragma once

#include <functional>
#include <vector>

#include "cdlab/tensor.hpp"

namespace cdlab {

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of fn against central differences.
// Non-scalar outputs are reduced with a fixed pseudo-random weighting so every
// output element contributes. Error per element is |analytic - numeric| /
// max(1, |analytic|, |numeric|); the worst one is returned.
// Requires epsilon in [1e-6, 1e-3].
double finite_diff_check(const TensorFn& fn, const std::vector<Tensor>& inputs,
                         double epsilon = 1e-5);

}  // namespace cdlab
