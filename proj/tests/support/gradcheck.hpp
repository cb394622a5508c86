#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "granudet/nn/tensor.hpp"

namespace granudet::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

// Central finite differences against the engine's reverse sweep. The relative
// error uses max(|analytic|, |numeric|, floor) as denominator.
inline GradCheckResult grad_check(const std::function<nn::Tensor(const std::vector<nn::Tensor>&)>& f,
                                  std::vector<nn::Tensor> inputs, double h = 1e-6, double floor = 1e-3) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  nn::Tensor out = f(inputs);
  out.backward();
  GradCheckResult r;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto& vals = t.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + h;
      const double up = f(inputs).item();
      vals[i] = keep - h;
      const double down = f(inputs).item();
      vals[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double abs_err = std::fabs(numeric - analytic[i]);
      const double denom = std::max({std::fabs(numeric), std::fabs(analytic[i]), floor});
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      r.max_rel_error = std::max(r.max_rel_error, abs_err / denom);
    }
  }
  return r;
}

}  // namespace granudet::testing
