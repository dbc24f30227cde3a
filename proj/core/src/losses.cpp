#include "riskkit/losses.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "riskkit/errors.hpp"

namespace riskkit {

namespace {

void check_same(const Tensor& a, const Tensor& b, const char* name) {
  if (!a.defined() || !b.defined()) throw ShapeError(std::string(name) + ": undefined tensor");
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace

Tensor mse(const Tensor& prediction, const Tensor& target) {
  check_same(prediction, target, "mse");
  return mean(square(prediction - target));
}

Tensor cross_entropy(const Tensor& probs, const Tensor& one_hot) {
  check_same(probs, one_hot, "cross_entropy");
  const std::size_t n = probs.rows(), m = probs.cols();
  const auto p = probs.values();
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double v = p[i * m + j];
      if (!(v >= 0.0 && v <= 1.0)) {
        throw NumericError("cross_entropy: probability outside [0,1] at row " + std::to_string(i));
      }
      row += v;
    }
    if (std::abs(row - 1.0) > 1e-6) {
      throw NumericError("cross_entropy: row " + std::to_string(i) + " sums to " + std::to_string(row));
    }
  }
  return -(sum(one_hot * log(probs)) * (1.0 / static_cast<double>(n)));
}

Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& one_hot) {
  check_same(logits, one_hot, "softmax_cross_entropy");
  return -(sum(one_hot * log_softmax_rows(logits)) * (1.0 / static_cast<double>(logits.rows())));
}

Tensor gaussian_nll(const Tensor& mu, const Tensor& sigma, const Tensor& target) {
  check_same(mu, sigma, "gaussian_nll");
  check_same(mu, target, "gaussian_nll");
  for (double s : sigma.values()) {
    if (!(s > 0.0)) throw NumericError("gaussian_nll: sigma must be strictly positive");
  }
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  const Tensor z = (target - mu) / sigma;
  return mean(log(sigma) + square(z) * 0.5) + half_log_2pi;
}

}  // namespace riskkit
