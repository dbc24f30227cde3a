#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "riskkit/tensor.hpp"

namespace riskkit {

// Root mean squared error over every element.
double rmse(const Tensor& prediction, const Tensor& target);
// Mean Gaussian negative log-likelihood; sigma is a standard deviation.
double nll_gaussian(const Tensor& mu, const Tensor& sigma, const Tensor& target);

// P(positive score > negative score), ties counted as 1/2, from ranks.
double auc_roc(std::span<const double> negative, std::span<const double> positive);
double auc_roc(const Tensor& negative, const Tensor& positive);

struct CalibrationCurve {
  std::vector<double> expected;
  std::vector<double> observed;

  nlohmann::json to_json() const;
};

// 0.05, 0.10, ..., 0.95.
std::vector<double> default_calibration_grid();
// Coverage of the central interval of mass c around mu, per grid level.
CalibrationCurve calibration_curve(const Tensor& mu, const Tensor& sigma, const Tensor& target,
                                   const std::vector<double>& grid = default_calibration_grid());
double max_calibration_error(const CalibrationCurve& curve);

// Mean and sample std over trials; std is absent for a single trial.
struct Summary {
  double mean = 0.0;
  std::optional<double> stddev;
  std::size_t count = 0;

  nlohmann::json to_json() const;
};
Summary summarize(std::span<const double> values);

}  // namespace riskkit
