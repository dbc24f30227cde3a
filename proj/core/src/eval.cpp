#include "riskkit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "riskkit/errors.hpp"

namespace riskkit {
namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.defined() || !b.defined()) throw ShapeError(std::string(what) + ": undefined tensor");
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  if (a.numel() == 0) throw ShapeError(std::string(what) + ": empty input");
}

void require_positive_sigma(std::span<const double> sigma, const char* what) {
  for (double s : sigma) {
    if (!(s > 0.0)) throw NumericError(std::string(what) + ": sigma must be > 0");
  }
}

}  // namespace

double rmse(const Tensor& prediction, const Tensor& target) {
  require_same_shape(prediction, target, "rmse");
  const auto p = prediction.values();
  const auto t = target.values();
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += (p[i] - t[i]) * (p[i] - t[i]);
  return std::sqrt(sum / static_cast<double>(p.size()));
}

double nll_gaussian(const Tensor& mu, const Tensor& sigma, const Tensor& target) {
  require_same_shape(mu, target, "nll_gaussian");
  require_same_shape(sigma, target, "nll_gaussian");
  const auto m = mu.values();
  const auto s = sigma.values();
  const auto t = target.values();
  require_positive_sigma(s, "nll_gaussian");
  const double half_log_2pi = 0.5 * std::log(2.0 * M_PI);
  double sum = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double z = (t[i] - m[i]) / s[i];
    sum += half_log_2pi + std::log(s[i]) + 0.5 * z * z;
  }
  return sum / static_cast<double>(m.size());
}

double auc_roc(std::span<const double> negative, std::span<const double> positive) {
  if (negative.empty() || positive.empty()) throw DataError("auc_roc: both score sets must be non-empty");
  struct Entry {
    double score;
    bool positive;
  };
  std::vector<Entry> all;
  all.reserve(negative.size() + positive.size());
  for (double s : negative) all.push_back({s, false});
  for (double s : positive) all.push_back({s, true});
  for (const auto& e : all) {
    if (std::isnan(e.score)) throw NumericError("auc_roc: NaN score");
  }
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });
  // Sum of positive ranks, ties sharing their average rank. Ranks are kept
  // doubled so that the sum stays an exact integer.
  std::uint64_t doubled_rank_sum = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const std::uint64_t doubled_rank = static_cast<std::uint64_t>(i + 1 + j);  // 2 * average of i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].positive) doubled_rank_sum += doubled_rank;
    }
    i = j;
  }
  const auto np = static_cast<std::uint64_t>(positive.size());
  const auto nn = static_cast<std::uint64_t>(negative.size());
  // Doubled Mann-Whitney U: 2 * (R - np(np+1)/2).
  const std::uint64_t doubled_u = doubled_rank_sum - np * (np + 1);
  return static_cast<double>(doubled_u) / (2.0 * static_cast<double>(np) * static_cast<double>(nn));
}

double auc_roc(const Tensor& negative, const Tensor& positive) {
  if (!negative.defined() || !positive.defined()) throw DataError("auc_roc: undefined score set");
  return auc_roc(negative.values(), positive.values());
}

nlohmann::json CalibrationCurve::to_json() const { return {{"expected", expected}, {"observed", observed}}; }

std::vector<double> default_calibration_grid() {
  std::vector<double> grid;
  for (int i = 1; i <= 19; ++i) grid.push_back(0.05 * i);
  return grid;
}

CalibrationCurve calibration_curve(const Tensor& mu, const Tensor& sigma, const Tensor& target,
                                   const std::vector<double>& grid) {
  require_same_shape(mu, target, "calibration_curve");
  require_same_shape(sigma, target, "calibration_curve");
  if (grid.empty()) throw ConfigError("calibration_curve: empty confidence grid");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] >= 0.0 && grid[i] <= 1.0)) throw ConfigError("calibration_curve: grid levels must lie in [0, 1]");
    if (i > 0 && !(grid[i] > grid[i - 1])) throw ConfigError("calibration_curve: grid must be strictly increasing");
  }
  const auto m = mu.values();
  const auto s = sigma.values();
  const auto t = target.values();
  require_positive_sigma(s, "calibration_curve");
  // Mass of the smallest central interval that contains each target.
  std::vector<double> needed(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) needed[i] = std::erf(std::abs(t[i] - m[i]) / (s[i] * M_SQRT2));
  std::sort(needed.begin(), needed.end());
  CalibrationCurve curve;
  curve.expected = grid;
  for (double c : grid) {
    const auto inside = std::upper_bound(needed.begin(), needed.end(), c) - needed.begin();
    curve.observed.push_back(static_cast<double>(inside) / static_cast<double>(needed.size()));
  }
  return curve;
}

double max_calibration_error(const CalibrationCurve& curve) {
  double worst = 0.0;
  for (std::size_t i = 0; i < curve.expected.size(); ++i) {
    worst = std::max(worst, std::abs(curve.observed[i] - curve.expected[i]));
  }
  return worst;
}

nlohmann::json Summary::to_json() const {
  nlohmann::json j{{"mean", mean}, {"trials", count}};
  j["std"] = stddev ? nlohmann::json(*stddev) : nlohmann::json(nullptr);
  return j;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

}  // namespace riskkit
