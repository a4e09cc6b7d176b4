#pragma once

#include <cstddef>
#include <vector>

#include "cdlab/tensor.hpp"

namespace cdlab {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  // Applies one update from the accumulated gradients, then clears them.
  void step();
  void zero_grad();

  void set_lr(double lr) { config_.lr = lr; }
  std::size_t steps() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace cdlab
