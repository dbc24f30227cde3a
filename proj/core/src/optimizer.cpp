#include "riskkit/optimizer.hpp"

#include <cmath>
#include <string>

#include "riskkit/errors.hpp"

namespace riskkit {

std::string_view to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::sgd:
      return "sgd";
    case OptimizerKind::adam:
      return "adam";
  }
  return "unknown";
}

OptimizerKind parse_optimizer_kind(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (kind == OptimizerKind::adam) {
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw ConfigError("adam betas must lie in (0, 1)");
    }
    if (!(epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
  }
}

Optimizer::Optimizer(OptimizerConfig config, std::vector<Tensor> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  for (const auto& p : params_) {
    if (!p.defined() || !p.is_leaf()) throw ConfigError("optimizer parameters must be leaf tensors");
  }
  if (config_.kind == OptimizerKind::adam) {
    for (const auto& p : params_) {
      first_moment_.emplace_back(p.numel(), 0.0);
      second_moment_.emplace_back(p.numel(), 0.0);
    }
  }
}

void Optimizer::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (!params_[k].has_grad()) {
      throw Error("optimizer step: parameter " + std::to_string(k) + " has no gradient");
    }
  }
  ++steps_;
  const double lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::sgd) {
    for (auto& p : params_) {
      auto w = p.mutable_values();
      const auto g = p.grad();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    }
  } else {
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto w = params_[k].mutable_values();
      const auto g = params_[k].grad();
      auto& m = first_moment_[k];
      auto& v = second_moment_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
      }
    }
  }
  zero_grad();
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace riskkit
