#include "riskkit/moments.hpp"

#include <algorithm>

#include "riskkit/errors.hpp"

namespace riskkit {

namespace {

void check_same_shapes(const std::vector<Tensor>& ts, const char* what) {
  if (ts.empty()) throw ConfigError(std::string(what) + ": no members");
  for (const auto& t : ts) {
    if (!t.defined() || t.shape() != ts.front().shape()) {
      throw ShapeError(std::string(what) + ": members must share one shape");
    }
  }
}

}  // namespace

Moments sample_moments(const std::vector<Tensor>& samples) {
  check_same_shapes(samples, "sample_moments");
  const std::size_t n = samples.size(), m = samples.front().numel();
  std::vector<double> mean(m, 0.0), var(m, 0.0);
  for (const auto& s : samples) {
    const auto v = s.values();
    for (std::size_t j = 0; j < m; ++j) mean[j] += v[j];
  }
  for (auto& x : mean) x /= static_cast<double>(n);
  if (n > 1) {
    for (const auto& s : samples) {
      const auto v = s.values();
      for (std::size_t j = 0; j < m; ++j) {
        const double d = v[j] - mean[j];
        var[j] += d * d;
      }
    }
    for (auto& x : var) x /= static_cast<double>(n - 1);
  }
  const auto& shape = samples.front().shape();
  return {Tensor(shape, std::move(mean)), Tensor(shape, std::move(var))};
}

Moments mixture_of_normals(const std::vector<Tensor>& means, const std::vector<Tensor>& sigmas) {
  check_same_shapes(means, "mixture_of_normals");
  check_same_shapes(sigmas, "mixture_of_normals");
  if (means.size() != sigmas.size() || means.front().shape() != sigmas.front().shape()) {
    throw ShapeError("mixture_of_normals: means and sigmas must pair up");
  }
  const std::size_t n = means.size(), m = means.front().numel();
  std::vector<double> mu(m, 0.0), second(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = means[i].values();
    const auto s = sigmas[i].values();
    for (std::size_t j = 0; j < m; ++j) {
      if (!(s[j] >= 0.0)) throw NumericError("mixture_of_normals: negative sigma");
      mu[j] += a[j];
      second[j] += s[j] * s[j] + a[j] * a[j];
    }
  }
  std::vector<double> var(m);
  for (std::size_t j = 0; j < m; ++j) {
    mu[j] /= static_cast<double>(n);
    var[j] = std::max(0.0, second[j] / static_cast<double>(n) - mu[j] * mu[j]);
  }
  const auto& shape = means.front().shape();
  return {Tensor(shape, std::move(mu)), Tensor(shape, std::move(var))};
}

Tensor weighted_variance_sum(const std::vector<Tensor>& variances, const std::vector<double>& weights) {
  check_same_shapes(variances, "weighted_variance_sum");
  if (weights.size() != variances.size()) throw ConfigError("weighted_variance_sum: one weight per member");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ConfigError("weighted_variance_sum: weights must be nonnegative");
    total += w;
  }
  if (!(total > 0.0)) throw ConfigError("weighted_variance_sum: at least one weight must be positive");
  const std::size_t m = variances.front().numel();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < variances.size(); ++i) {
    if (weights[i] == 0.0) continue;
    const auto v = variances[i].values();
    for (std::size_t j = 0; j < m; ++j) out[j] += weights[i] * v[j];
  }
  for (auto& x : out) x /= total;
  return Tensor(variances.front().shape(), std::move(out));
}

}  // namespace riskkit
