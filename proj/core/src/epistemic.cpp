#include "riskkit/epistemic.hpp"

#include <cmath>

#include "riskkit/errors.hpp"
#include "riskkit/parallel.hpp"
#include "riskkit/serialization.hpp"

namespace riskkit {

std::vector<std::uint64_t> pass_seeds(std::uint64_t seed, std::size_t samples) {
  std::vector<std::uint64_t> out(samples);
  for (std::size_t t = 0; t < samples; ++t) out[t] = derive_seed(seed, t);
  return out;
}

Moments dropout_score(const SequentialModel& model, const Tensor& x, std::span<const std::uint64_t> seeds) {
  if (!model.has_stochastic_layers()) throw ConfigError("dropout_score: model has no stochastic layers");
  if (seeds.size() < 2) throw ConfigError("dropout_score: variance needs T >= 2 samples");
  NoGradGuard no_grad;
  std::vector<Tensor> samples;
  samples.reserve(seeds.size());
  for (auto s : seeds) {
    Rng rng(s);
    samples.push_back(model.forward(x, Mode::infer, true, rng));
  }
  return sample_moments(samples);
}

Moments dropout_score(const SequentialModel& model, const Tensor& x, std::size_t samples, std::uint64_t seed) {
  const auto seeds = pass_seeds(seed, samples);
  return dropout_score(model, x, seeds);
}

Moments dropout_score(const RiskAwareModel& model, const Tensor& x, std::size_t samples, std::uint64_t seed) {
  if (!model.has_metric(MetricKind::dropout)) throw ConfigError("dropout_score: model has no stochastic layers");
  if (!model.trained()) throw UntrainedModelError("dropout_score: model has never been trained");
  return dropout_score(model.extractor().backbone.then(model.base_head()), x, samples, seed);
}

// ---------------------------------------------------------------- ensembles

EnsembleModel::EnsembleModel(std::vector<RiskAwareModel> members, EnsembleConfig config)
    : members_(std::move(members)), config_(std::move(config)) {
  if (members_.empty()) throw ConfigError("ensemble has no members");
}

EnsembleModel EnsembleModel::create(const SequentialModel& model, EnsembleConfig config, const WrapOptions& options) {
  if (config.members < 2) throw ConfigError("ensemble: needs at least 2 members");
  if (config.member_seeds.empty()) {
    for (std::size_t k = 0; k < config.members; ++k) config.member_seeds.push_back(derive_seed(options.seed, 1000 + k));
  }
  if (config.member_seeds.size() != config.members) {
    throw ConfigError("ensemble: member_seeds must list one seed per member");
  }
  std::vector<RiskAwareModel> members;
  members.reserve(config.members);
  for (auto s : config.member_seeds) {
    members.push_back(RiskAwareModel::build(clone_reinitialized(model, s), config.inner,
                                            WrapOptions{options.split_index, s}, true));
  }
  return EnsembleModel(std::move(members), std::move(config));
}

bool EnsembleModel::trained() const {
  for (const auto& m : members_) {
    if (!m.trained()) return false;
  }
  return true;
}

bool EnsembleModel::members_expose_sigma() const { return members_.front().mve_head() != nullptr; }

std::vector<TrainingReport> EnsembleModel::train(const Examples& data, const TrainConfig& config) {
  std::vector<TrainingReport> reports(members_.size());
  parallel_for(members_.size(), [&](std::size_t i) {
    TrainConfig member_config = config;
    member_config.seed = derive_seed(config_.member_seeds[i], config.seed);
    try {
      reports[i] = members_[i].train(data, member_config);
    } catch (const DivergenceError& e) {
      throw DivergenceError("ensemble member " + std::to_string(i) + ": " + e.what(), e.epoch(), e.batch());
    }
  });
  return reports;
}

std::vector<RiskOutput> EnsembleModel::member_outputs(const Tensor& x, const SamplingOptions& sampling) const {
  std::vector<RiskOutput> outputs(members_.size());
  parallel_for(members_.size(), [&](std::size_t i) {
    outputs[i] = members_[i].predict_with_risk(x, SamplingOptions{sampling.samples, derive_seed(sampling.seed, i)});
  });
  return outputs;
}

Moments EnsembleModel::score(const Tensor& x) const {
  const auto outputs = member_outputs(x);
  std::vector<Tensor> preds;
  for (const auto& o : outputs) preds.push_back(o.prediction);
  if (members_expose_sigma() && members_.front().task() == TaskKind::regression) {
    std::vector<Tensor> sigmas;
    for (const auto& o : outputs) sigmas.push_back(o.risks.at("mve"));
    return mixture_of_normals(preds, sigmas);
  }
  return sample_moments(preds);
}

EnsembleModel ensemble_train(const SequentialModel& model, const EnsembleConfig& config, const Examples& data,
                             const TrainConfig& train_config) {
  EnsembleModel e = EnsembleModel::create(model, config, WrapOptions{std::nullopt, train_config.seed});
  e.train(data, train_config);
  return e;
}

Moments ensemble_score(const EnsembleModel& ensemble, const Tensor& x) { return ensemble.score(x); }

void save_ensemble(const std::filesystem::path& dir, const EnsembleModel& ensemble) {
  MetricConfig cfg;
  cfg.kind = MetricKind::ensemble;
  cfg.ensemble = ensemble.config();
  nlohmann::json members = nlohmann::json::array();
  for (std::size_t i = 0; i < ensemble.size(); ++i) {
    const std::string name = "member_" + std::to_string(i);
    save_wrapped(dir / name, ensemble.member(i));
    members.push_back(name);
  }
  const nlohmann::json manifest{
      {"format", "riskkit-ensemble"}, {"version", 1}, {"config", cfg.to_json()}, {"members", members}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

EnsembleModel load_ensemble(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw DataError("no ensemble at " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "riskkit-ensemble") throw DataError(path.string() + ": not an ensemble manifest");
  const MetricConfig cfg = MetricConfig::from_json(j.at("config"));
  std::vector<RiskAwareModel> members;
  for (const auto& name : j.at("members")) members.push_back(load_wrapped(dir / name.get<std::string>()));
  return EnsembleModel(std::move(members), cfg.ensemble);
}

// ---------------------------------------------------------------- vae

VaeModel vae_train(const FeatureExtractor& extractor, const Examples& data, const VaeConfig& config,
                   const TrainConfig& train_config, std::vector<double>* loss_curve) {
  train_config.validate();
  if (data.size() == 0) throw DataError("training set is empty");
  const std::size_t latent = config.latent_dim ? config.latent_dim : std::min<std::size_t>(8, extractor.feature_dim);
  VaeModel v = VaeModel::attach(extractor, latent, config.kl_weight, derive_seed(train_config.seed, 7));
  std::vector<Tensor> params = extractor.backbone.parameters();
  for (auto& p : v.own_parameters()) params.push_back(p);
  Optimizer opt(train_config.optimizer, params);
  const std::size_t n = data.size();
  for (std::size_t epoch = 0; epoch < train_config.epochs; ++epoch) {
    const std::uint64_t epoch_seed = derive_seed(train_config.seed, epoch);
    const auto order = shuffled_indices(n, derive_seed(epoch_seed, 1));
    double sum = 0.0;
    std::size_t b = 0;
    for (std::size_t start = 0; start < n; start += train_config.batch_size, ++b) {
      const std::size_t end = std::min(n, start + train_config.batch_size);
      const Examples batch = data.subset(std::span<const std::size_t>(order.data() + start, end - start));
      Rng rng(derive_seed(epoch_seed, 2 + b));
      const Tensor f = extractor.forward(batch.x, Mode::train, false, rng);
      const auto t = v.terms(batch.x, f, rng);
      const Tensor loss = t.reconstruction + t.kl * v.kl_weight;
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw DivergenceError("vae loss became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(b),
                              epoch, b);
      }
      loss.backward();
      opt.step();
      sum += value * static_cast<double>(end - start);
    }
    if (loss_curve) loss_curve->push_back(sum / static_cast<double>(n));
  }
  return v;
}

Tensor vae_score(const VaeModel& vae, const Tensor& x) {
  NoGradGuard no_grad;
  Rng unused(0);
  return vae.score_from_features(x, vae.encoder.forward(x, Mode::infer, false, unused));
}

}  // namespace riskkit
