#include "riskkit/heads.hpp"

#include "riskkit/errors.hpp"
#include "riskkit/losses.hpp"

namespace riskkit {

Tensor positive_sigma(const Tensor& raw) { return softplus(raw) + kSigmaFloor; }

Tensor forward_plain(const SequentialModel& model, const Tensor& x) {
  Rng unused(0);
  return model.forward(x, Mode::infer, false, unused);
}

MveHead MveHead::attach(const SequentialModel& base_head, std::size_t feature_dim, std::uint64_t seed) {
  std::size_t end = base_head.size();
  while (end > 0 && base_head.layers()[end - 1].spec.kind == LayerKind::softmax_output) --end;
  if (end == 0) throw IncompatibleMetricError("mve: model head has no layer producing the mean");
  MveHead h;
  h.mu_head = base_head.slice(0, end);
  h.sigma_head = SequentialModel::from_specs({LayerSpec::dense(feature_dim, h.mu_head.output_dim())}, seed);
  return h;
}

Tensor MveHead::mu(const Tensor& features) const { return forward_plain(mu_head, features); }

Tensor MveHead::sigma(const Tensor& features) const {
  return positive_sigma(forward_plain(sigma_head, features));
}

VaeModel VaeModel::attach(const FeatureExtractor& encoder, std::size_t latent_dim, double kl_weight,
                          std::uint64_t seed) {
  if (latent_dim == 0 || latent_dim > encoder.feature_dim) {
    throw ConfigError("vae latent_dim must lie in [1, feature_dim = " + std::to_string(encoder.feature_dim) + "]");
  }
  if (!(kl_weight >= 0.0)) throw ConfigError("vae kl_weight must be nonnegative");
  VaeModel v;
  v.encoder = encoder;
  v.latent_dim = latent_dim;
  v.kl_weight = kl_weight;
  v.decoder = mirror_decoder(encoder, latent_dim, derive_seed(seed, 3));
  v.mu_head = SequentialModel::from_specs({LayerSpec::dense(encoder.feature_dim, latent_dim)}, derive_seed(seed, 1));
  v.logvar_head =
      SequentialModel::from_specs({LayerSpec::dense(encoder.feature_dim, latent_dim)}, derive_seed(seed, 2));
  return v;
}

Tensor gaussian_kl(const Tensor& mu, const Tensor& logvar) {
  return row_sum(exp(logvar) + square(mu) - 1.0 - logvar) * 0.5;
}

VaeModel::Terms VaeModel::terms(const Tensor& x, const Tensor& features, Rng& rng) const {
  const Tensor mu = latent_mean(features);
  const Tensor logvar = latent_logvar(features);
  std::vector<double> eps(mu.numel());
  for (auto& e : eps) e = rng.normal();
  const Tensor z = mu + exp(logvar * 0.5) * Tensor(mu.shape(), std::move(eps));
  const Tensor recon = forward_plain(decoder, z);
  return {mse(recon, x), mean(gaussian_kl(mu, logvar))};
}

Tensor VaeModel::latent_mean(const Tensor& features) const { return forward_plain(mu_head, features); }

Tensor VaeModel::latent_logvar(const Tensor& features) const { return forward_plain(logvar_head, features); }

Tensor VaeModel::score_from_features(const Tensor& x, const Tensor& features) const {
  const Tensor recon = forward_plain(decoder, latent_mean(features));
  return row_mean(square(recon - x));
}

std::vector<Tensor> VaeModel::own_parameters() const {
  std::vector<Tensor> out = mu_head.parameters();
  for (auto& p : logvar_head.parameters()) out.push_back(p);
  for (auto& p : decoder.parameters()) out.push_back(p);
  return out;
}

}  // namespace riskkit
