#pragma once

#include <vector>

#include "riskkit/tensor.hpp"

namespace riskkit {

struct Moments {
  Tensor mean;
  Tensor variance;
};

// Elementwise sample mean and unbiased (n - 1) variance of equally shaped
// tensors; a single sample has variance 0.
Moments sample_moments(const std::vector<Tensor>& samples);

// Equal-weight mixture of N normals: mean = avg(mu_i),
// variance = avg(sigma_i^2 + mu_i^2) - mean^2 (clamped at 0).
Moments mixture_of_normals(const std::vector<Tensor>& means, const std::vector<Tensor>& sigmas);

// sum_i w_i var_i / sum_i w_i.
Tensor weighted_variance_sum(const std::vector<Tensor>& variances, const std::vector<double>& weights);

}  // namespace riskkit
