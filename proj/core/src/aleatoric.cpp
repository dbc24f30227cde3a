#include "riskkit/aleatoric.hpp"

#include "riskkit/errors.hpp"
#include "riskkit/losses.hpp"

namespace riskkit {

Tensor mve_regression_loss(const MveHead& head, const Tensor& features, const Tensor& y) {
  const Tensor mu = head.mu(features);
  if (mu.shape() != y.shape()) {
    throw ShapeError("mve: target shape " + shape_string(y.shape()) + " does not match head output " +
                     shape_string(mu.shape()));
  }
  return gaussian_nll(mu, head.sigma(features), y);
}

Tensor mve_classification_loss(const Tensor& mu, const Tensor& sigma, const Tensor& one_hot, std::size_t samples,
                               Rng& rng) {
  if (samples == 0) throw ConfigError("mve classification needs at least one logit sample");
  if (mu.shape() != sigma.shape() || mu.shape() != one_hot.shape()) {
    throw ShapeError("mve classification: mu, sigma and labels must share one shape");
  }
  for (double s : sigma.values()) {
    if (!(s > 0.0)) throw NumericError("mve classification: sigma must be strictly positive");
  }
  Tensor total;
  for (std::size_t t = 0; t < samples; ++t) {
    std::vector<double> eps(mu.numel());
    for (auto& e : eps) e = rng.normal();
    const Tensor logits = mu + sigma * Tensor(mu.shape(), std::move(eps));
    total = t == 0 ? logits : total + logits;
  }
  const Tensor average = total * (1.0 / static_cast<double>(samples));
  return softmax_cross_entropy(average, one_hot);
}

Tensor mve_classification_step(const MveHead& head, const Tensor& features, const Tensor& one_hot,
                               std::size_t samples, std::uint64_t seed) {
  Rng rng(seed);
  return mve_classification_loss(head.mu(features), head.sigma(features), one_hot, samples, rng);
}

AleatoricScore aleatoric_score(const RiskAwareModel& model, const Tensor& x) {
  const MveHead* head = model.mve_head();
  if (!head) throw ConfigError("aleatoric_score needs a model wrapped with mve");
  if (!model.trained()) throw UntrainedModelError("aleatoric_score: model has never been trained");
  NoGradGuard no_grad;
  AleatoricScore out;
  out.sigma = head->sigma(model.features(x));
  out.summary = risk_summary(out.sigma);
  return out;
}

}  // namespace riskkit
