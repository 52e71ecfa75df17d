#pragma once

#include <vector>

#include "smelab/tensor.hpp"

namespace smelab {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed list of tensors. step() consumes and clears their grads;
// tensors without a gradient are skipped.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamOptions options);

  void step();
  void zero_grad();
  long steps() const { return t_; }

 private:
  std::vector<Tensor*> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace smelab
