#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "riskkit/heads.hpp"
#include "riskkit/model.hpp"
#include "riskkit/moments.hpp"
#include "riskkit/wrapper.hpp"

namespace riskkit {

// MC dropout: T stochastic forward passes, one mask stream per seed.
Moments dropout_score(const SequentialModel& model, const Tensor& x, std::span<const std::uint64_t> pass_seeds);
Moments dropout_score(const SequentialModel& model, const Tensor& x, std::size_t samples, std::uint64_t seed);
Moments dropout_score(const RiskAwareModel& model, const Tensor& x, std::size_t samples, std::uint64_t seed);

// Seeds of the T passes drawn from one base seed.
std::vector<std::uint64_t> pass_seeds(std::uint64_t seed, std::size_t samples);

/// N independently initialized and trained copies of one architecture.
class EnsembleModel {
 public:
  EnsembleModel(std::vector<RiskAwareModel> members, EnsembleConfig config);

  // Members are clone_reinitialized(model, seed_i) wrapped with config.inner.
  static EnsembleModel create(const SequentialModel& model, EnsembleConfig config, const WrapOptions& options = {});

  std::size_t size() const { return members_.size(); }
  const RiskAwareModel& member(std::size_t i) const { return members_.at(i); }
  RiskAwareModel& member(std::size_t i) { return members_.at(i); }
  const EnsembleConfig& config() const { return config_; }
  const std::vector<std::uint64_t>& seeds() const { return config_.member_seeds; }
  bool trained() const;
  bool members_expose_sigma() const;

  // Members train concurrently; member i uses only its own seed.
  std::vector<TrainingReport> train(const Examples& data, const TrainConfig& config);

  std::vector<RiskOutput> member_outputs(const Tensor& x, const SamplingOptions& sampling = {}) const;
  // Moments across member predictions; a mixture of normals when members
  // carry an MVE head.
  Moments score(const Tensor& x) const;

 private:
  std::vector<RiskAwareModel> members_;
  EnsembleConfig config_;
};

EnsembleModel ensemble_train(const SequentialModel& model, const EnsembleConfig& config, const Examples& data,
                             const TrainConfig& train_config);
Moments ensemble_score(const EnsembleModel& ensemble, const Tensor& x);

// manifest.json plus one wrapped-model directory per member.
void save_ensemble(const std::filesystem::path& dir, const EnsembleModel& ensemble);
EnsembleModel load_ensemble(const std::filesystem::path& dir);

// Trains the extractor and the VAE heads on reconstruction + kl_weight * KL.
VaeModel vae_train(const FeatureExtractor& extractor, const Examples& data, const VaeConfig& config,
                   const TrainConfig& train_config, std::vector<double>* loss_curve = nullptr);
// Per-sample reconstruction MSE, shape [batch].
Tensor vae_score(const VaeModel& vae, const Tensor& x);

}  // namespace riskkit
