#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "riskkit/model.hpp"
#include "riskkit/random.hpp"
#include "riskkit/tensor.hpp"

namespace riskkit {

inline constexpr double kSigmaFloor = 1e-6;

// softplus(raw) + 1e-6, elementwise.
Tensor positive_sigma(const Tensor& raw);

// Mean and standard-deviation heads over shared features. mu_head aliases
// the wrapped model's head (without a trailing softmax, so it emits logits
// for classifiers); sigma_head is new.
struct MveHead {
  SequentialModel mu_head;
  SequentialModel sigma_head;

  static MveHead attach(const SequentialModel& base_head, std::size_t feature_dim, std::uint64_t seed);

  Tensor mu(const Tensor& features) const;
  Tensor sigma(const Tensor& features) const;
  std::vector<Tensor> own_parameters() const { return sigma_head.parameters(); }
};

// Encoder = shared extractor + dense heads for the latent mean and log
// variance; decoder mirrors the extractor.
struct VaeModel {
  FeatureExtractor encoder;
  SequentialModel mu_head;
  SequentialModel logvar_head;
  SequentialModel decoder;
  std::size_t latent_dim = 0;
  double kl_weight = 1.0;

  struct Terms {
    Tensor reconstruction;  // scalar, mean squared error over every element
    Tensor kl;              // scalar, batch mean of the per-sample KL
  };

  static VaeModel attach(const FeatureExtractor& encoder, std::size_t latent_dim, double kl_weight,
                         std::uint64_t seed);

  // Reparameterized forward from precomputed encoder features.
  Terms terms(const Tensor& x, const Tensor& features, Rng& rng) const;
  Tensor latent_mean(const Tensor& features) const;
  Tensor latent_logvar(const Tensor& features) const;
  // Per-sample reconstruction MSE decoding the latent mean, shape [batch].
  Tensor score_from_features(const Tensor& x, const Tensor& features) const;
  std::vector<Tensor> own_parameters() const;
};

// Per-sample KL(N(mu, exp(logvar)) || N(0, I)), shape [batch].
Tensor gaussian_kl(const Tensor& mu, const Tensor& logvar);

// Runs a parameter-only stack (dense/relu/softmax) without any sampling.
Tensor forward_plain(const SequentialModel& model, const Tensor& x);

}  // namespace riskkit
