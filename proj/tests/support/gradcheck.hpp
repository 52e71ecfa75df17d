#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "smelab/tape.hpp"

namespace smelab::testing {

using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
  return std::abs(analytic - numeric) / denom;
}

// Compares the tape gradient of `build` w.r.t. every entry of `inputs`
// against central finite differences with step `eps`.
inline GradCheck check_gradients(const std::vector<Tensor*>& inputs, const LossBuilder& build,
                                 double eps) {
  for (Tensor* t : inputs) {
    t->set_requires_grad(true);
    t->clear_grad();
  }
  {
    Tape tape;
    std::vector<Var> leaves;
    for (Tensor* t : inputs) leaves.push_back(tape.leaf(*t));
    tape.backward(build(tape, leaves));
  }
  auto evaluate = [&] {
    Tape tape(GradMode::kDisabled);
    std::vector<Var> leaves;
    for (Tensor* t : inputs) leaves.push_back(tape.leaf(*t));
    return build(tape, leaves).item();
  };
  GradCheck result;
  for (Tensor* t : inputs) {
    std::vector<double> analytic(t->numel(), 0.0);
    if (t->has_grad()) analytic.assign(t->grad().begin(), t->grad().end());
    for (std::size_t i = 0; i < t->numel(); ++i) {
      const double saved = (*t)[i];
      (*t)[i] = saved + eps;
      const double up = evaluate();
      (*t)[i] = saved - eps;
      const double down = evaluate();
      (*t)[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[i], numeric));
      result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic[i] - numeric));
      ++result.checked;
    }
    t->clear_grad();
  }
  return result;
}

}  // namespace smelab::testing
