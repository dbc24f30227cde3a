#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "riskkit/tensor.hpp"

namespace riskkit {

enum class OptimizerKind { sgd, adam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

// First-order optimizer bound to a fixed, ordered parameter list. Moment
// state is kept per parameter in list order.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Tensor> params);

  // Applies one update using the current gradients, then zeroes them.
  // Throws if any parameter has never received a gradient.
  void step();
  void zero_grad();

  const OptimizerConfig& config() const { return config_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  std::size_t steps() const { return steps_; }

 private:
  OptimizerConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> first_moment_;
  std::vector<std::vector<double>> second_moment_;
  std::size_t steps_ = 0;
};

}  // namespace riskkit
