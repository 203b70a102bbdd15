#pragma once

#include <vector>

#include "abcp/common.hpp"

namespace abcp {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m, v;  // sized on first step
  i64 t = 0;
};

// One minimizing step: theta -= lr * mhat / (sqrt(vhat) + eps). Callers that
// maximize negate the gradient they feed in.
void adam_step(std::vector<double>& theta, const std::vector<double>& grad,
               AdamState& state, const AdamConfig& cfg);

}  // namespace abcp
