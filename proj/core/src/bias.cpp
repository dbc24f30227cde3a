#include "riskkit/bias.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "riskkit/errors.hpp"
#include "riskkit/format.hpp"

namespace riskkit {

namespace {

std::vector<double> column(const Tensor& features, std::size_t dim) {
  const std::size_t n = features.rows(), d = features.cols();
  const auto v = features.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = v[i * d + dim];
  return out;
}

std::size_t bin_of(const std::vector<double>& edges, double x) {
  const std::size_t bins = edges.size() - 1;
  if (x <= edges.front()) return 0;
  if (x >= edges.back()) return bins - 1;
  const double width = (edges.back() - edges.front()) / static_cast<double>(bins);
  auto b = static_cast<std::size_t>((x - edges.front()) / width);
  return std::min(b, bins - 1);
}

double stddev(const std::vector<double>& xs) {
  const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

}  // namespace

std::string_view to_string(DensityKind kind) { return kind == DensityKind::histogram ? "histogram" : "kde"; }

bool DensityEstimator::active(std::size_t dim) const {
  return !std::binary_search(dropped_.begin(), dropped_.end(), dim);
}

DensityEstimator DensityEstimator::fit(const Tensor& features, DensityKind kind, std::size_t bins,
                                       double bandwidth) {
  if (!features.defined() || features.shape().size() != 2) {
    throw ShapeError("fit_density expects [batch, dim] features");
  }
  const std::size_t n = features.rows(), d = features.cols();
  if (n < 2) throw DataError("fit_density needs at least 2 samples");
  if (kind == DensityKind::histogram && bins == 0) throw ConfigError("histogram needs at least one bin");

  DensityEstimator est;
  est.kind_ = kind;
  est.feature_dim_ = d;
  est.total_count_ = n;
  est.edges_.resize(d);
  est.counts_.resize(d);
  est.references_.resize(d);
  est.bandwidths_.assign(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    auto col = column(features, k);
    const auto [lo, hi] = std::minmax_element(col.begin(), col.end());
    if (!(*hi > *lo)) {
      est.dropped_.push_back(k);
      continue;
    }
    if (kind == DensityKind::histogram) {
      auto& e = est.edges_[k];
      e.resize(bins + 1);
      for (std::size_t b = 0; b <= bins; ++b) {
        e[b] = *lo + (*hi - *lo) * static_cast<double>(b) / static_cast<double>(bins);
      }
      e.back() = *hi;
      est.counts_[k].assign(bins, 0.0);
      for (double x : col) est.counts_[k][bin_of(e, x)] += 1.0;
    } else {
      est.bandwidths_[k] =
          bandwidth > 0.0 ? bandwidth : stddev(col) * std::pow(static_cast<double>(n), -1.0 / 5.0);
      est.references_[k] = std::move(col);
    }
  }
  return est;
}

void DensityEstimator::update(const Tensor& features) {
  if (!fitted()) throw Error("update() on an unfitted density estimator");
  if (features.shape().size() != 2 || features.cols() != feature_dim_) {
    throw ShapeError("density update: expected " + std::to_string(feature_dim_) + " feature columns");
  }
  for (std::size_t k = 0; k < feature_dim_; ++k) {
    if (!active(k)) continue;
    auto col = column(features, k);
    if (kind_ == DensityKind::histogram) {
      for (double x : col) counts_[k][bin_of(edges_[k], x)] += 1.0;
    } else {
      references_[k].insert(references_[k].end(), col.begin(), col.end());
    }
  }
  total_count_ += features.rows();
}

std::vector<double> DensityEstimator::probabilities(std::size_t dim) const {
  const auto& c = counts_.at(dim);
  const double total = std::accumulate(c.begin(), c.end(), 0.0);
  std::vector<double> p(c.size());
  for (std::size_t b = 0; b < c.size(); ++b) p[b] = c[b] / total;
  return p;
}

Tensor DensityEstimator::score(const Tensor& features) const {
  if (!fitted()) throw Error("score() on an unfitted density estimator");
  if (!features.defined() || features.shape().size() != 2 || features.cols() != feature_dim_) {
    throw ShapeError("density_score: expected " + std::to_string(feature_dim_) + " feature columns");
  }
  const std::size_t n = features.rows();
  const auto v = features.values();
  std::vector<double> out(n, 1.0);
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  for (std::size_t k = 0; k < feature_dim_; ++k) {
    if (!active(k)) continue;
    if (kind_ == DensityKind::histogram) {
      const auto p = probabilities(k);
      for (std::size_t i = 0; i < n; ++i) out[i] *= p[bin_of(edges_[k], v[i * feature_dim_ + k])];
    } else {
      const auto& refs = references_[k];
      const double h = bandwidths_[k];
      for (std::size_t i = 0; i < n; ++i) {
        const double x = v[i * feature_dim_ + k];
        double acc = 0.0;
        for (double r : refs) {
          const double u = (x - r) / h;
          acc += std::exp(-0.5 * u * u);
        }
        out[i] *= acc * inv_sqrt_2pi / (h * static_cast<double>(refs.size()));
      }
    }
  }
  return Tensor::vector(std::move(out));
}

nlohmann::json DensityEstimator::to_json() const {
  nlohmann::json j{{"kind", to_string(kind_)},
                   {"feature_dim", feature_dim_},
                   {"total_count", total_count_},
                   {"dropped_dimensions", dropped_},
                   {"factorized", true}};
  if (kind_ == DensityKind::histogram) {
    j["edges"] = edges_;
    j["counts"] = counts_;
  } else {
    j["bandwidths"] = bandwidths_;
    j["references"] = references_;
  }
  return j;
}

DensityEstimator DensityEstimator::from_json(const nlohmann::json& j) {
  DensityEstimator est;
  try {
    est.kind_ = j.at("kind").get<std::string>() == "kde" ? DensityKind::kde : DensityKind::histogram;
    est.feature_dim_ = j.at("feature_dim").get<std::size_t>();
    est.total_count_ = j.at("total_count").get<std::size_t>();
    est.dropped_ = j.at("dropped_dimensions").get<std::vector<std::size_t>>();
    if (est.kind_ == DensityKind::histogram) {
      est.edges_ = j.at("edges").get<std::vector<std::vector<double>>>();
      est.counts_ = j.at("counts").get<std::vector<std::vector<double>>>();
    } else {
      est.bandwidths_ = j.at("bandwidths").get<std::vector<double>>();
      est.references_ = j.at("references").get<std::vector<std::vector<double>>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed density estimator JSON: ") + e.what());
  }
  return est;
}

DensityEstimator fit_density(const Tensor& features, DensityKind kind, std::size_t bins, double bandwidth) {
  return DensityEstimator::fit(features, kind, bins, bandwidth);
}

Tensor density_score(const DensityEstimator& estimator, const Tensor& features) {
  return estimator.score(features);
}

std::vector<double> average_rank_percentiles(const std::vector<double>& scores) {
  const std::size_t n = scores.size();
  std::vector<double> pct(n, 50.0);
  if (n < 2) return pct;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    // 0-based ranks i..j share their average.
    const double avg = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) pct[order[k]] = 100.0 * avg / static_cast<double>(n - 1);
    i = j + 1;
  }
  return pct;
}

std::vector<double> debias_weights(const std::vector<double>& scores, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("debias smoothing alpha must be positive");
  if (scores.empty()) return {};
  std::vector<double> w(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) total += (w[i] = 1.0 / (scores[i] + alpha));
  const double scale = static_cast<double>(w.size()) / total;
  for (auto& x : w) x *= scale;
  return w;
}

std::vector<double> debias_weights(const BiasReport& report, double alpha) {
  return debias_weights(report.scores, alpha);
}

BiasReport bias_percentiles(const DensityEstimator& estimator, const Tensor& features, double alpha) {
  BiasReport r;
  const Tensor s = estimator.score(features);
  r.scores.assign(s.values().begin(), s.values().end());
  r.percentiles = average_rank_percentiles(r.scores);
  r.alpha = alpha;
  r.weights = debias_weights(r.scores, alpha);
  r.dropped_dimensions = estimator.dropped_dimensions();
  return r;
}

std::string bias_report_csv(const BiasReport& report) {
  std::ostringstream os;
  os << "index,score,percentile,weight\n";
  for (std::size_t i = 0; i < report.scores.size(); ++i) {
    os << i << ',' << format_double(report.scores[i]) << ',' << format_double(report.percentiles[i]) << ','
       << format_double(report.weights[i]) << '\n';
  }
  return os.str();
}

}  // namespace riskkit
