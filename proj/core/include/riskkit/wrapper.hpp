#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "riskkit/bias.hpp"
#include "riskkit/data.hpp"
#include "riskkit/heads.hpp"
#include "riskkit/model.hpp"
#include "riskkit/optimizer.hpp"
#include "riskkit/tensor.hpp"

namespace riskkit {

enum class MetricKind { mve, dropout, ensemble, vae, histogram_bias, kde_bias };

std::string_view to_string(MetricKind kind);
MetricKind parse_metric_kind(std::string_view name);
bool is_bias_metric(MetricKind kind);

struct MveConfig {
  // Stochastic-logit samples per classification step.
  std::size_t samples = 20;
};

struct DropoutConfig {
  double rate = 0.1;
  std::size_t samples = 20;
};

struct VaeConfig {
  // 0 selects min(8, feature_dim) at wrap time.
  std::size_t latent_dim = 0;
  double kl_weight = 1.0;
};

struct BiasConfig {
  std::size_t bins = 10;
  // <= 0 selects Scott's rule.
  double bandwidth = 0.0;
  double alpha = 0.01;
};

struct MetricConfig;

struct EnsembleConfig {
  std::size_t members = 5;
  // Empty: derived from the wrap seed.
  std::vector<std::uint64_t> member_seeds;
  // Metrics attached to every member (series nesting, e.g. ensemble of MVE).
  std::vector<MetricConfig> inner;
};

struct MetricConfig {
  MetricKind kind = MetricKind::mve;
  double loss_weight = 1.0;
  MveConfig mve;
  DropoutConfig dropout;
  EnsembleConfig ensemble;
  VaeConfig vae;
  BiasConfig bias;

  static MetricConfig make_mve(std::size_t samples = 20);
  static MetricConfig make_dropout(double rate = 0.1, std::size_t samples = 20);
  static MetricConfig make_ensemble(std::size_t members = 5, std::vector<MetricConfig> inner = {},
                                    std::vector<std::uint64_t> seeds = {});
  static MetricConfig make_vae(std::size_t latent_dim = 0, double kl_weight = 1.0);
  static MetricConfig make_histogram(std::size_t bins = 10, double alpha = 0.01);
  static MetricConfig make_kde(double bandwidth = 0.0, double alpha = 0.01);

  // "mve", "ensemble(mve)", ...
  std::string id() const;
  void validate() const;
  nlohmann::json to_json() const;
  static MetricConfig from_json(const nlohmann::json& j);
};

// Accepts "mve", "ensemble", "ensemble(mve)", "dropout:0.2", "ensemble:3(mve)", ...
MetricConfig parse_metric_spec(std::string_view text);
// "dropout+mve", "ensemble(mve)+histogram": '+' outside parentheses separates metrics.
std::vector<MetricConfig> parse_metric_list(std::string_view text);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  // Resample each epoch with probability proportional to debias weights.
  bool debias_resampling = false;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct LossBreakdown {
  double task = 0.0;
  std::map<std::string, double> metrics;
  double total = 0.0;
};

struct TrainingReport {
  std::vector<double> task_loss;
  std::map<std::string, std::vector<double>> metric_loss;
  std::vector<double> total_loss;
  std::size_t steps = 0;
  std::vector<TrainingReport> members;

  nlohmann::json to_json() const;
};

struct SamplingOptions {
  // Overrides the dropout sample count T.
  std::optional<std::size_t> samples;
  std::uint64_t seed = 0;
};

// Per-sample Gaussian predictives that a mixture can be formed from.
struct GaussianComponents {
  std::vector<Tensor> means;
  std::vector<Tensor> sigmas;
};

struct RiskOutput {
  Tensor prediction;
  std::map<std::string, Tensor> risks;
  std::optional<GaussianComponents> components;
  std::map<std::string, std::string> metadata;
};

// Mean over every non-batch dimension; a 1-D tensor is returned as is.
Tensor risk_summary(const Tensor& risk);

class EnsembleModel;

struct WrapOptions {
  std::optional<std::size_t> split_index;
  std::uint64_t seed = 0;
};

struct BatchLosses {
  Tensor task;  // monitored task loss (not back-propagated when MVE replaces it)
  std::vector<std::pair<std::string, Tensor>> terms;
};

/// g = wrap(f, metrics): shared extractor, per-metric heads and loss terms.
/// The source model's parameters are aliased, not copied.
class RiskAwareModel {
 public:
  RiskAwareModel();
  RiskAwareModel(RiskAwareModel&&) noexcept;
  RiskAwareModel& operator=(RiskAwareModel&&) noexcept;
  ~RiskAwareModel();

  TaskKind task() const { return task_; }
  const SequentialModel& source() const { return source_; }
  const FeatureExtractor& extractor() const { return extractor_; }
  const SequentialModel& base_head() const { return head_; }
  std::size_t split_index() const { return split_index_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<MetricConfig>& metrics() const { return metrics_; }
  std::vector<std::string> metric_ids() const;
  bool has_metric(MetricKind kind) const;
  std::map<std::string, double> loss_weights() const;

  const MveHead* mve_head() const { return mve_ ? &*mve_ : nullptr; }
  const VaeModel* vae() const { return vae_ ? &*vae_ : nullptr; }
  const EnsembleModel* ensemble() const { return ensemble_.get(); }
  EnsembleModel* ensemble() { return ensemble_.get(); }
  const DensityEstimator* density(MetricKind kind) const;

  std::size_t steps() const { return steps_; }
  bool trains_shared_backbone() const;
  bool trained() const;

  // Deterministic extractor features.
  Tensor features(const Tensor& x) const;
  // VAE latent mean when a VAE is attached, else the extractor features.
  Tensor bias_features(const Tensor& x) const;
  // Task loss of the deterministic prediction; differentiable in x when x
  // requires grad.
  Tensor task_loss(const Tensor& x, const Tensor& y) const;

  // Taped per-term losses for one batch, drawn with `seed`.
  BatchLosses loss_terms(const Tensor& x, const Tensor& y, std::uint64_t seed) const;
  // Every parameter trained by the shared optimizer, in a fixed order.
  std::vector<Tensor> shared_parameters() const;
  // One optimizer step over the accumulated gradients of every term.
  LossBreakdown train_step(const Tensor& x, const Tensor& y, std::uint64_t seed,
                           const OptimizerConfig& optimizer = {});

  TrainingReport train(const Examples& data, const TrainConfig& config);
  void refit_density(const Tensor& x);

  RiskOutput predict_with_risk(const Tensor& x, const SamplingOptions& sampling = {}) const;

  // Free-form JSON carried through save/load (composition plan, data stats).
  nlohmann::json annotations = nlohmann::json::object();

  nlohmann::json manifest() const;

 private:
  friend RiskAwareModel wrap(const SequentialModel&, std::vector<MetricConfig>, const WrapOptions&);
  friend class EnsembleModel;
  friend RiskAwareModel load_wrapped(const std::filesystem::path&);
  friend void save_wrapped(const std::filesystem::path&, const RiskAwareModel&);

  static RiskAwareModel build(const SequentialModel& model, std::vector<MetricConfig> metrics,
                              const WrapOptions& options, bool allow_empty);

  Tensor head_output(const Tensor& features) const;
  std::vector<std::pair<std::string, Tensor>> named_state() const;

  TaskKind task_ = TaskKind::regression;
  SequentialModel source_;
  FeatureExtractor extractor_;
  SequentialModel head_;
  SequentialModel logits_head_;
  std::size_t split_index_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<MetricConfig> metrics_;
  std::optional<MveHead> mve_;
  std::optional<DropoutConfig> dropout_;
  std::optional<VaeModel> vae_;
  std::unique_ptr<EnsembleModel> ensemble_;
  std::map<MetricKind, BiasConfig> bias_config_;
  std::map<MetricKind, DensityEstimator> density_;
  std::unique_ptr<Optimizer> optimizer_;
  std::size_t steps_ = 0;
};

RiskAwareModel wrap(const SequentialModel& model, std::vector<MetricConfig> metrics, const WrapOptions& options = {});
TrainingReport train(RiskAwareModel& model, const Examples& data, const TrainConfig& config);
RiskOutput predict_with_risk(const RiskAwareModel& model, const Tensor& x, const SamplingOptions& sampling = {});

// Directory layout: manifest.json, params.ckpt, member_<i>/ for ensembles.
void save_wrapped(const std::filesystem::path& dir, const RiskAwareModel& model);
RiskAwareModel load_wrapped(const std::filesystem::path& dir);

}  // namespace riskkit
