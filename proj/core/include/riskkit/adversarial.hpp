#pragma once

#include <limits>

#include "riskkit/tensor.hpp"
#include "riskkit/wrapper.hpp"

namespace riskkit {

struct ValueRange {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
};

// x + epsilon * sign(d task_loss / dx), clamped to `range` without moving any
// entry further than epsilon from x. epsilon = 0 returns an exact copy.
Tensor fgsm_perturb(const RiskAwareModel& model, const Tensor& x, const Tensor& y, double epsilon,
                    const ValueRange& range = {});

}  // namespace riskkit
