#pragma once

#include "riskkit/tensor.hpp"

namespace riskkit {

// Mean of squared residuals over every element.
Tensor mse(const Tensor& prediction, const Tensor& target);

// Mean over the batch of -sum_j y_j log p_j. `probs` rows must be
// distributions (entries in [0,1], rows summing to 1 within 1e-6).
Tensor cross_entropy(const Tensor& probs, const Tensor& one_hot);

// Same objective computed from logits through log-softmax; the numerically
// stable path used for training.
Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& one_hot);

// Mean over elements of 0.5*log(2*pi*sigma^2) + (y - mu)^2 / (2*sigma^2).
// sigma must be strictly positive.
Tensor gaussian_nll(const Tensor& mu, const Tensor& sigma, const Tensor& target);

}  // namespace riskkit
