#pragma once

#include "smelab/random.hpp"
#include "smelab/tensor.hpp"

namespace smelab::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = normal(rng, 0.0, scale);
  return t;
}

}  // namespace smelab::testing
