#pragma once

#include <cstddef>
#include <cstdint>

#include "riskkit/heads.hpp"
#include "riskkit/random.hpp"
#include "riskkit/wrapper.hpp"

namespace riskkit {

// gaussian_nll(mu(features), sigma(features), y).
Tensor mve_regression_loss(const MveHead& head, const Tensor& features, const Tensor& y);

// Stochastic-logit classification loss: average T draws of mu + sigma * eps,
// softmax, cross entropy against one_hot.
Tensor mve_classification_loss(const Tensor& mu, const Tensor& sigma, const Tensor& one_hot, std::size_t samples,
                               Rng& rng);
Tensor mve_classification_step(const MveHead& head, const Tensor& features, const Tensor& one_hot,
                               std::size_t samples, std::uint64_t seed);

struct AleatoricScore {
  Tensor sigma;    // [batch, out] (per class for classifiers)
  Tensor summary;  // [batch], mean over output dims / classes
};

AleatoricScore aleatoric_score(const RiskAwareModel& model, const Tensor& x);

}  // namespace riskkit
