#pragma once

#include <cstddef>
#include <filesystem>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "riskkit/tensor.hpp"

namespace riskkit {

enum class DensityKind { histogram, kde };

std::string_view to_string(DensityKind kind);

/// Density over latent features, factorized as a product of per-dimension
/// marginals. Constant dimensions are dropped at fit time and listed in
/// dropped_dimensions().
class DensityEstimator {
 public:
  DensityEstimator() = default;

  // bins is used by histograms; bandwidth <= 0 selects Scott's rule (kde).
  static DensityEstimator fit(const Tensor& features, DensityKind kind, std::size_t bins = 10,
                              double bandwidth = 0.0);

  // Folds another batch into the fitted state. Histogram edges stay fixed
  // (out-of-range values land in the edge bins); kde gains references.
  void update(const Tensor& features);

  // Per-sample joint density, shape [batch].
  Tensor score(const Tensor& features) const;

  DensityKind kind() const { return kind_; }
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t total_count() const { return total_count_; }
  bool fitted() const { return feature_dim_ > 0; }
  const std::vector<std::size_t>& dropped_dimensions() const { return dropped_; }
  bool has_dropped_dimensions() const { return !dropped_.empty(); }

  // Histogram accessors, indexed by feature dimension.
  const std::vector<double>& edges(std::size_t dim) const { return edges_.at(dim); }
  std::vector<double> probabilities(std::size_t dim) const;

  // Kde accessors.
  double bandwidth(std::size_t dim) const { return bandwidths_.at(dim); }

  nlohmann::json to_json() const;
  static DensityEstimator from_json(const nlohmann::json& j);

 private:
  bool active(std::size_t dim) const;

  DensityKind kind_ = DensityKind::histogram;
  std::size_t feature_dim_ = 0;
  std::size_t total_count_ = 0;
  std::vector<std::size_t> dropped_;
  // histogram
  std::vector<std::vector<double>> edges_;
  std::vector<std::vector<double>> counts_;
  // kde
  std::vector<std::vector<double>> references_;  // [dim][sample]
  std::vector<double> bandwidths_;
};

DensityEstimator fit_density(const Tensor& features, DensityKind kind, std::size_t bins = 10,
                             double bandwidth = 0.0);
Tensor density_score(const DensityEstimator& estimator, const Tensor& features);

struct BiasReport {
  std::vector<double> scores;
  // Average-rank percentile of each score within the scored set, in [0, 100].
  std::vector<double> percentiles;
  std::vector<double> weights;
  double alpha = 0.01;
  bool factorized = true;
  std::vector<std::size_t> dropped_dimensions;
};

std::vector<double> average_rank_percentiles(const std::vector<double>& scores);

BiasReport bias_percentiles(const DensityEstimator& estimator, const Tensor& features, double alpha = 0.01);

// w_i = 1 / (score_i + alpha), rescaled to mean 1.
std::vector<double> debias_weights(const std::vector<double>& scores, double alpha);
std::vector<double> debias_weights(const BiasReport& report, double alpha);

// Columns: index,score,percentile,weight
std::string bias_report_csv(const BiasReport& report);

}  // namespace riskkit
