#include "riskkit/wrapper.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <unordered_set>

#include "riskkit/epistemic.hpp"
#include "riskkit/errors.hpp"
#include "riskkit/losses.hpp"
#include "riskkit/aleatoric.hpp"
#include "riskkit/serialization.hpp"

namespace riskkit {

namespace {

constexpr std::uint64_t kMveStream = 100;
constexpr std::uint64_t kVaeStream = 200;
constexpr std::uint64_t kMemberStream = 1000;

std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(seeds[i]);
  }
  return out;
}

SequentialModel strip_softmax(const SequentialModel& head) {
  std::size_t end = head.size();
  while (end > 0 && head.layers()[end - 1].spec.kind == LayerKind::softmax_output) --end;
  return head.slice(0, end);
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

double parse_double_arg(const std::string& s, const std::string& spec) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("bad numeric argument '" + s + "' in metric '" + spec + "'");
  }
  return v;
}

}  // namespace

// ---------------------------------------------------------------- configs

std::string_view to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::mve:
      return "mve";
    case MetricKind::dropout:
      return "dropout";
    case MetricKind::ensemble:
      return "ensemble";
    case MetricKind::vae:
      return "vae";
    case MetricKind::histogram_bias:
      return "histogram_bias";
    case MetricKind::kde_bias:
      return "kde_bias";
  }
  return "unknown";
}

MetricKind parse_metric_kind(std::string_view name) {
  if (name == "mve") return MetricKind::mve;
  if (name == "dropout") return MetricKind::dropout;
  if (name == "ensemble") return MetricKind::ensemble;
  if (name == "vae") return MetricKind::vae;
  if (name == "histogram_bias" || name == "histogram") return MetricKind::histogram_bias;
  if (name == "kde_bias" || name == "kde") return MetricKind::kde_bias;
  throw ConfigError("unknown metric '" + std::string(name) + "'");
}

bool is_bias_metric(MetricKind kind) { return kind == MetricKind::histogram_bias || kind == MetricKind::kde_bias; }

MetricConfig MetricConfig::make_mve(std::size_t samples) {
  MetricConfig c;
  c.kind = MetricKind::mve;
  c.mve.samples = samples;
  return c;
}

MetricConfig MetricConfig::make_dropout(double rate, std::size_t samples) {
  MetricConfig c;
  c.kind = MetricKind::dropout;
  c.dropout = {rate, samples};
  return c;
}

MetricConfig MetricConfig::make_ensemble(std::size_t members, std::vector<MetricConfig> inner,
                                         std::vector<std::uint64_t> seeds) {
  MetricConfig c;
  c.kind = MetricKind::ensemble;
  c.ensemble.members = members;
  c.ensemble.inner = std::move(inner);
  c.ensemble.member_seeds = std::move(seeds);
  return c;
}

MetricConfig MetricConfig::make_vae(std::size_t latent_dim, double kl_weight) {
  MetricConfig c;
  c.kind = MetricKind::vae;
  c.vae = {latent_dim, kl_weight};
  return c;
}

MetricConfig MetricConfig::make_histogram(std::size_t bins, double alpha) {
  MetricConfig c;
  c.kind = MetricKind::histogram_bias;
  c.bias.bins = bins;
  c.bias.alpha = alpha;
  return c;
}

MetricConfig MetricConfig::make_kde(double bandwidth, double alpha) {
  MetricConfig c;
  c.kind = MetricKind::kde_bias;
  c.bias.bandwidth = bandwidth;
  c.bias.alpha = alpha;
  return c;
}

std::string MetricConfig::id() const {
  std::string out(to_string(kind));
  if (kind == MetricKind::ensemble && !ensemble.inner.empty()) {
    out += '(';
    for (std::size_t i = 0; i < ensemble.inner.size(); ++i) {
      if (i) out += '+';
      out += ensemble.inner[i].id();
    }
    out += ')';
  }
  return out;
}

void MetricConfig::validate() const {
  const std::string name = id();
  if (!(loss_weight >= 0.0) || !std::isfinite(loss_weight)) {
    throw ConfigError("metric '" + name + "': loss weight must be finite and nonnegative");
  }
  switch (kind) {
    case MetricKind::mve:
      if (mve.samples == 0) throw ConfigError("mve: sample count T must be at least 1");
      break;
    case MetricKind::dropout:
      if (!(dropout.rate > 0.0 && dropout.rate < 1.0)) throw ConfigError("dropout: rate must lie in (0, 1)");
      if (dropout.samples == 0) throw ConfigError("dropout: sample count T must be at least 1");
      break;
    case MetricKind::ensemble: {
      if (ensemble.members < 2) throw ConfigError("ensemble: needs at least 2 members");
      if (!ensemble.member_seeds.empty() && ensemble.member_seeds.size() != ensemble.members) {
        throw ConfigError("ensemble: member_seeds must list one seed per member");
      }
      for (const auto& m : ensemble.inner) {
        if (m.kind != MetricKind::mve && m.kind != MetricKind::vae) {
          throw IncompatibleMetricError("ensemble: cannot nest '" + m.id() +
                                        "' inside an ensemble (only mve or vae)");
        }
        m.validate();
      }
      break;
    }
    case MetricKind::vae:
      if (!(vae.kl_weight >= 0.0) || !std::isfinite(vae.kl_weight)) {
        throw ConfigError("vae: kl_weight must be finite and nonnegative");
      }
      break;
    case MetricKind::histogram_bias:
    case MetricKind::kde_bias:
      if (kind == MetricKind::histogram_bias && bias.bins == 0) throw ConfigError("histogram_bias: bins must be >= 1");
      if (!(bias.alpha > 0.0)) throw ConfigError(name + ": alpha must be positive");
      break;
  }
}

nlohmann::json MetricConfig::to_json() const {
  nlohmann::json j{{"kind", to_string(kind)}, {"loss_weight", loss_weight}};
  switch (kind) {
    case MetricKind::mve:
      j["samples"] = mve.samples;
      break;
    case MetricKind::dropout:
      j["rate"] = dropout.rate;
      j["samples"] = dropout.samples;
      break;
    case MetricKind::ensemble: {
      j["members"] = ensemble.members;
      j["member_seeds"] = ensemble.member_seeds;
      auto inner = nlohmann::json::array();
      for (const auto& m : ensemble.inner) inner.push_back(m.to_json());
      j["inner"] = std::move(inner);
      break;
    }
    case MetricKind::vae:
      j["latent_dim"] = vae.latent_dim;
      j["kl_weight"] = vae.kl_weight;
      break;
    case MetricKind::histogram_bias:
      j["bins"] = bias.bins;
      j["alpha"] = bias.alpha;
      break;
    case MetricKind::kde_bias:
      j["bandwidth"] = bias.bandwidth;
      j["alpha"] = bias.alpha;
      break;
  }
  return j;
}

MetricConfig MetricConfig::from_json(const nlohmann::json& j) {
  MetricConfig c;
  try {
    if (j.is_string()) return parse_metric_spec(j.get<std::string>());
    c.kind = parse_metric_kind(j.at("kind").get<std::string>());
    c.loss_weight = j.value("loss_weight", 1.0);
    switch (c.kind) {
      case MetricKind::mve:
        c.mve.samples = j.value("samples", c.mve.samples);
        break;
      case MetricKind::dropout:
        c.dropout.rate = j.value("rate", c.dropout.rate);
        c.dropout.samples = j.value("samples", c.dropout.samples);
        break;
      case MetricKind::ensemble:
        c.ensemble.members = j.value("members", c.ensemble.members);
        c.ensemble.member_seeds = j.value("member_seeds", std::vector<std::uint64_t>{});
        if (j.contains("inner")) {
          for (const auto& m : j.at("inner")) c.ensemble.inner.push_back(from_json(m));
        }
        break;
      case MetricKind::vae:
        c.vae.latent_dim = j.value("latent_dim", c.vae.latent_dim);
        c.vae.kl_weight = j.value("kl_weight", c.vae.kl_weight);
        break;
      case MetricKind::histogram_bias:
      case MetricKind::kde_bias:
        c.bias.bins = j.value("bins", c.bias.bins);
        c.bias.bandwidth = j.value("bandwidth", c.bias.bandwidth);
        c.bias.alpha = j.value("alpha", c.bias.alpha);
        break;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed metric configuration: ") + e.what());
  }
  c.validate();
  return c;
}

MetricConfig parse_metric_spec(std::string_view text) {
  const std::string spec = trim(text);
  std::string head = spec, inner;
  if (auto open = spec.find('('); open != std::string::npos) {
    if (spec.back() != ')') throw ConfigError("unbalanced parentheses in metric '" + spec + "'");
    head = trim(spec.substr(0, open));
    inner = spec.substr(open + 1, spec.size() - open - 2);
  }
  std::string name = head, arg;
  if (auto colon = head.find(':'); colon != std::string::npos) {
    name = trim(head.substr(0, colon));
    arg = trim(head.substr(colon + 1));
  }
  MetricConfig c;
  c.kind = parse_metric_kind(name);
  if (!arg.empty()) {
    const double v = parse_double_arg(arg, spec);
    switch (c.kind) {
      case MetricKind::mve:
        c.mve.samples = static_cast<std::size_t>(v);
        break;
      case MetricKind::dropout:
        c.dropout.rate = v;
        break;
      case MetricKind::ensemble:
        c.ensemble.members = static_cast<std::size_t>(v);
        break;
      case MetricKind::vae:
        c.vae.latent_dim = static_cast<std::size_t>(v);
        break;
      case MetricKind::histogram_bias:
        c.bias.bins = static_cast<std::size_t>(v);
        break;
      case MetricKind::kde_bias:
        c.bias.bandwidth = v;
        break;
    }
  }
  if (!inner.empty()) {
    if (c.kind != MetricKind::ensemble) {
      throw IncompatibleMetricError("only ensembles take nested metrics ('" + spec + "')");
    }
    std::size_t start = 0;
    while (start <= inner.size()) {
      auto plus = inner.find('+', start);
      if (plus == std::string::npos) plus = inner.size();
      c.ensemble.inner.push_back(parse_metric_spec(inner.substr(start, plus - start)));
      start = plus + 1;
    }
  }
  c.validate();
  return c;
}

std::vector<MetricConfig> parse_metric_list(std::string_view text) {
  std::vector<MetricConfig> out;
  int depth = 0;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    if (i < text.size() && text[i] == '(') ++depth;
    if (i < text.size() && text[i] == ')') --depth;
    if (depth < 0) throw ConfigError("unbalanced parentheses in '" + std::string(text) + "'");
    if (i == text.size() || (text[i] == '+' && depth == 0)) {
      const std::string item = trim(text.substr(start, i - start));
      if (item.empty()) throw ConfigError("empty metric in '" + std::string(text) + "'");
      out.push_back(parse_metric_spec(item));
      start = i + 1;
    }
  }
  if (depth != 0) throw ConfigError("unbalanced parentheses in '" + std::string(text) + "'");
  return out;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  optimizer.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"optimizer", to_string(optimizer.kind)},
          {"learning_rate", optimizer.learning_rate},
          {"beta1", optimizer.beta1},
          {"beta2", optimizer.beta2},
          {"epsilon", optimizer.epsilon},
          {"seed", seed},
          {"debias_resampling", debias_resampling}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("optimizer")) c.optimizer.kind = parse_optimizer_kind(j.at("optimizer").get<std::string>());
    c.optimizer.learning_rate = j.value("learning_rate", c.optimizer.learning_rate);
    c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
    c.optimizer.epsilon = j.value("epsilon", c.optimizer.epsilon);
    c.seed = j.value("seed", c.seed);
    c.debias_resampling = j.value("debias_resampling", c.debias_resampling);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed training configuration: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json TrainingReport::to_json() const {
  nlohmann::json j{{"task_loss", task_loss}, {"metric_loss", metric_loss}, {"total_loss", total_loss}, {"steps", steps}};
  if (!members.empty()) {
    auto m = nlohmann::json::array();
    for (const auto& r : members) m.push_back(r.to_json());
    j["members"] = std::move(m);
  }
  return j;
}

Tensor risk_summary(const Tensor& risk) {
  if (risk.shape().size() <= 1) return risk.detach();
  NoGradGuard no_grad;
  return row_mean(risk.reshape({risk.rows(), risk.cols()}));
}

// ---------------------------------------------------------------- model

RiskAwareModel::RiskAwareModel() = default;
RiskAwareModel::RiskAwareModel(RiskAwareModel&&) noexcept = default;
RiskAwareModel& RiskAwareModel::operator=(RiskAwareModel&&) noexcept = default;
RiskAwareModel::~RiskAwareModel() = default;

RiskAwareModel RiskAwareModel::build(const SequentialModel& model, std::vector<MetricConfig> metrics,
                                     const WrapOptions& options, bool allow_empty) {
  if (!allow_empty && metrics.empty()) throw ConfigError("wrap needs at least one metric");
  std::set<MetricKind> seen;
  for (const auto& m : metrics) {
    m.validate();
    if (!seen.insert(m.kind).second) {
      throw ConfigError("metric '" + std::string(to_string(m.kind)) + "' configured twice");
    }
  }

  RiskAwareModel g;
  g.seed_ = options.seed;
  g.source_ = model;
  g.task_ = (!model.empty() && model.layers().back().spec.kind == LayerKind::softmax_output)
                ? TaskKind::classification
                : TaskKind::regression;

  // Stage 1: shared feature extractor.
  g.split_index_ = options.split_index ? *options.split_index : default_split_index(model);
  auto [extractor, head] = split_feature_extractor(model, g.split_index_);
  g.head_ = head;
  g.logits_head_ = strip_softmax(head);
  if (g.logits_head_.empty()) throw ConfigError("model head has no parameterized layer");

  // Stage 2: structural modifications, in declaration order.
  for (const auto& m : metrics) {
    if (m.kind != MetricKind::dropout) continue;
    const auto& layers = extractor.backbone.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].spec.kind == LayerKind::dropout) {
        throw IncompatibleMetricError("metric 'dropout' conflicts with existing dropout at layer " +
                                      std::to_string(i) + " of the extractor");
      }
    }
    extractor.backbone = insert_dropout(extractor.backbone, m.dropout.rate);
    g.dropout_ = m.dropout;
  }

  // Stage 3: augmentations and new models.
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    auto& m = metrics[i];
    switch (m.kind) {
      case MetricKind::mve:
        g.mve_ = MveHead::attach(head, extractor.feature_dim, derive_seed(options.seed, kMveStream + i));
        break;
      case MetricKind::vae:
        if (m.vae.latent_dim == 0) m.vae.latent_dim = std::min<std::size_t>(8, extractor.feature_dim);
        g.vae_ = VaeModel::attach(extractor, m.vae.latent_dim, m.vae.kl_weight, derive_seed(options.seed, kVaeStream + i));
        break;
      case MetricKind::ensemble: {
        auto& seeds = m.ensemble.member_seeds;
        if (seeds.empty()) {
          for (std::size_t k = 0; k < m.ensemble.members; ++k) {
            seeds.push_back(derive_seed(options.seed, kMemberStream + k));
          }
        }
        if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
          throw ConfigError("ensemble: member seeds must be distinct");
        }
        g.ensemble_ = std::make_unique<EnsembleModel>(
            EnsembleModel::create(model, m.ensemble, WrapOptions{g.split_index_, options.seed}));
        break;
      }
      case MetricKind::histogram_bias:
      case MetricKind::kde_bias:
        g.bias_config_[m.kind] = m.bias;
        break;
      case MetricKind::dropout:
        break;
    }
  }
  g.extractor_ = extractor;

  // Stage 4: loss terms are read from metrics_ (weights) by loss_terms().
  g.metrics_ = std::move(metrics);
  return g;
}

std::vector<std::string> RiskAwareModel::metric_ids() const {
  std::vector<std::string> out;
  for (const auto& m : metrics_) out.push_back(m.id());
  return out;
}

bool RiskAwareModel::has_metric(MetricKind kind) const {
  return std::any_of(metrics_.begin(), metrics_.end(), [&](const MetricConfig& m) { return m.kind == kind; });
}

std::map<std::string, double> RiskAwareModel::loss_weights() const {
  std::map<std::string, double> out;
  if (!mve_) out["task"] = 1.0;
  for (const auto& m : metrics_) {
    if (m.kind == MetricKind::mve || m.kind == MetricKind::vae) out[m.id()] = m.loss_weight;
  }
  return out;
}

const DensityEstimator* RiskAwareModel::density(MetricKind kind) const {
  auto it = density_.find(kind);
  return it == density_.end() ? nullptr : &it->second;
}

bool RiskAwareModel::trains_shared_backbone() const {
  return std::any_of(metrics_.begin(), metrics_.end(),
                     [](const MetricConfig& m) { return m.kind != MetricKind::ensemble; }) ||
         metrics_.empty();
}

bool RiskAwareModel::trained() const {
  if (trains_shared_backbone() && steps_ == 0) return false;
  return !ensemble_ || ensemble_->trained();
}

Tensor RiskAwareModel::features(const Tensor& x) const {
  if (!x.defined() || x.shape().size() != 2 || x.cols() != source_.input_dim()) {
    throw ShapeError("input must be [batch, " + std::to_string(source_.input_dim()) + "]");
  }
  Rng unused(0);
  return extractor_.forward(x, Mode::infer, false, unused);
}

Tensor RiskAwareModel::bias_features(const Tensor& x) const {
  const Tensor f = features(x);
  return vae_ ? vae_->latent_mean(f) : f;
}

Tensor RiskAwareModel::head_output(const Tensor& features) const { return forward_plain(head_, features); }

Tensor RiskAwareModel::task_loss(const Tensor& x, const Tensor& y) const {
  if (ensemble_ && !trains_shared_backbone()) {
    Tensor total;
    for (std::size_t i = 0; i < ensemble_->size(); ++i) {
      const Tensor l = ensemble_->member(i).task_loss(x, y);
      total = total.defined() ? total + l : l;
    }
    return total * (1.0 / static_cast<double>(ensemble_->size()));
  }
  const Tensor f = features(x);
  if (task_ == TaskKind::classification) return softmax_cross_entropy(forward_plain(logits_head_, f), y);
  return mse(forward_plain(head_, f), y);
}

BatchLosses RiskAwareModel::loss_terms(const Tensor& x, const Tensor& y, std::uint64_t seed) const {
  if (!x.defined() || x.shape().size() != 2 || x.cols() != source_.input_dim()) {
    throw ShapeError("training input must be [batch, " + std::to_string(source_.input_dim()) + "]");
  }
  if (!y.defined() || y.shape().size() != 2 || y.rows() != x.rows() || y.cols() != source_.output_dim()) {
    throw ShapeError("training target must be [batch, " + std::to_string(source_.output_dim()) + "]");
  }
  Rng rng(seed);
  const Tensor f = extractor_.forward(x, Mode::train, false, rng);
  BatchLosses out;
  Tensor mean_out;
  if (task_ == TaskKind::classification) {
    mean_out = forward_plain(logits_head_, f);
    out.task = softmax_cross_entropy(mean_out, y);
  } else {
    mean_out = forward_plain(head_, f);
    out.task = mse(mean_out, y);
  }
  for (const auto& m : metrics_) {
    if (m.kind != MetricKind::mve) continue;
    const Tensor sigma = mve_->sigma(f);
    const Tensor nll = task_ == TaskKind::regression
                           ? gaussian_nll(mean_out, sigma, y)
                           : mve_classification_loss(mean_out, sigma, y, m.mve.samples, rng);
    out.terms.emplace_back(m.id(), nll * m.loss_weight);
  }
  if (!mve_) out.terms.emplace_back("task", out.task);
  for (const auto& m : metrics_) {
    if (m.kind != MetricKind::vae) continue;
    const auto t = vae_->terms(x, f, rng);
    out.terms.emplace_back(m.id(), (t.reconstruction + t.kl * vae_->kl_weight) * m.loss_weight);
  }
  return out;
}

std::vector<Tensor> RiskAwareModel::shared_parameters() const {
  std::vector<Tensor> all = extractor_.backbone.parameters();
  for (auto& p : head_.parameters()) all.push_back(p);
  if (mve_) {
    for (auto& p : mve_->own_parameters()) all.push_back(p);
  }
  if (vae_) {
    for (auto& p : vae_->own_parameters()) all.push_back(p);
  }
  std::vector<Tensor> out;
  std::unordered_set<const void*> seen;
  for (auto& p : all) {
    if (seen.insert(p.node().get()).second) out.push_back(p);
  }
  return out;
}

LossBreakdown RiskAwareModel::train_step(const Tensor& x, const Tensor& y, std::uint64_t seed,
                                         const OptimizerConfig& optimizer) {
  if (!optimizer_) optimizer_ = std::make_unique<Optimizer>(optimizer, shared_parameters());
  const BatchLosses batch = loss_terms(x, y, seed);
  LossBreakdown out;
  out.task = batch.task.item();
  for (const auto& [name, term] : batch.terms) {
    const double v = term.item();
    if (!std::isfinite(v)) throw DivergenceError("loss term '" + name + "' became non-finite", 0, 0);
    if (name != "task") out.metrics[name] = v;
    out.total += v;
  }
  for (const auto& [name, term] : batch.terms) term.backward();
  optimizer_->step();
  ++steps_;
  return out;
}

TrainingReport RiskAwareModel::train(const Examples& data, const TrainConfig& config) {
  config.validate();
  if (data.size() == 0) throw DataError("training set is empty");
  if (data.x.cols() != source_.input_dim() || data.y.cols() != source_.output_dim()) {
    throw DataError("dataset dims [" + std::to_string(data.x.cols()) + " -> " + std::to_string(data.y.cols()) +
                    "] do not match model [" + std::to_string(source_.input_dim()) + " -> " +
                    std::to_string(source_.output_dim()) + "]");
  }
  TrainingReport report;
  if (ensemble_) report.members = ensemble_->train(data, config);

  const std::size_t n = data.size();
  const bool resample = config.debias_resampling && !bias_config_.empty();
  if (trains_shared_backbone()) {
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      const std::uint64_t epoch_seed = derive_seed(config.seed, epoch);
      std::vector<std::size_t> order;
      if (resample && epoch > 0 && n >= 2) {
        refit_density(data.x);
        const auto& [kind, cfg] = *bias_config_.begin();
        const Tensor scores = density_.at(kind).score(bias_features(data.x));
        const std::vector<double> s(scores.values().begin(), scores.values().end());
        order = weighted_indices(debias_weights(s, cfg.alpha), n, derive_seed(epoch_seed, 1));
      } else {
        order = shuffled_indices(n, derive_seed(epoch_seed, 1));
      }
      double task_sum = 0.0, total_sum = 0.0;
      std::map<std::string, double> metric_sum;
      std::size_t batch_index = 0;
      for (std::size_t start = 0; start < n; start += config.batch_size, ++batch_index) {
        const std::size_t end = std::min(n, start + config.batch_size);
        const std::span<const std::size_t> rows(order.data() + start, end - start);
        const Examples batch = data.subset(rows);
        LossBreakdown lb;
        try {
          lb = train_step(batch.x, batch.y, derive_seed(epoch_seed, 2 + batch_index), config.optimizer);
        } catch (const DivergenceError& e) {
          throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_index),
                                epoch, batch_index);
        } catch (const NumericError& e) {
          throw DivergenceError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batch_index),
                                epoch, batch_index);
        }
        const double w = static_cast<double>(end - start);
        task_sum += w * lb.task;
        total_sum += w * lb.total;
        for (const auto& [name, v] : lb.metrics) metric_sum[name] += w * v;
      }
      report.task_loss.push_back(task_sum / static_cast<double>(n));
      report.total_loss.push_back(total_sum / static_cast<double>(n));
      for (const auto& [name, v] : metric_sum) report.metric_loss[name].push_back(v / static_cast<double>(n));
    }
  }
  if (!bias_config_.empty() && config.epochs > 0 && n >= 2) refit_density(data.x);
  report.steps = steps_;
  return report;
}

void RiskAwareModel::refit_density(const Tensor& x) {
  if (bias_config_.empty()) return;
  NoGradGuard no_grad;
  const Tensor f = bias_features(x);
  for (const auto& [kind, cfg] : bias_config_) {
    density_[kind] = fit_density(f, kind == MetricKind::histogram_bias ? DensityKind::histogram : DensityKind::kde,
                                 cfg.bins, cfg.bandwidth);
  }
}

RiskOutput RiskAwareModel::predict_with_risk(const Tensor& x, const SamplingOptions& sampling) const {
  if (!trained()) throw UntrainedModelError("predict_with_risk: model has never been trained");
  NoGradGuard no_grad;
  RiskOutput out;
  out.metadata["task"] = std::string(to_string(task_));
  out.metadata["seed"] = std::to_string(sampling.seed);

  const bool shared = trains_shared_backbone();
  if (shared) {
    (void)features(x);  // shape check
    const std::size_t samples = dropout_ ? sampling.samples.value_or(dropout_->samples) : 1;
    if (samples == 0) throw ConfigError("sample count T must be at least 1");
    const auto seeds = pass_seeds(sampling.seed, samples);
    std::vector<Tensor> preds, sigmas, recon;
    for (std::size_t t = 0; t < samples; ++t) {
      Rng rng(seeds[t]);
      const Tensor f = extractor_.forward(x, Mode::infer, dropout_.has_value(), rng);
      preds.push_back(head_output(f));
      if (mve_) sigmas.push_back(mve_->sigma(f));
      if (vae_) recon.push_back(vae_->score_from_features(x, f));
    }
    const Moments pm = sample_moments(preds);
    out.prediction = pm.mean;
    for (const auto& m : metrics_) {
      switch (m.kind) {
        case MetricKind::dropout:
          out.risks[m.id()] = pm.variance;
          out.metadata["T"] = std::to_string(samples);
          out.metadata["variance"] = "unbiased";
          break;
        case MetricKind::mve:
          out.risks[m.id()] = sample_moments(sigmas).mean;
          out.metadata["sigma_convention"] = "std";
          if (task_ == TaskKind::classification) out.metadata["classification_summary"] = "mean over classes";
          if (dropout_ && task_ == TaskKind::regression) out.components = GaussianComponents{preds, sigmas};
          break;
        case MetricKind::vae:
          out.risks[m.id()] = sample_moments(recon).mean;
          break;
        case MetricKind::histogram_bias:
        case MetricKind::kde_bias: {
          auto it = density_.find(m.kind);
          if (it == density_.end()) throw UntrainedModelError(m.id() + ": density has not been fitted");
          out.risks[m.id()] = it->second.score(bias_features(x));
          out.metadata["density_factorized"] = "true";
          break;
        }
        case MetricKind::ensemble:
          break;
      }
    }
  }
  if (ensemble_) {
    const auto outputs = ensemble_->member_outputs(x, sampling);
    std::vector<Tensor> preds;
    for (const auto& o : outputs) preds.push_back(o.prediction);
    Moments em;
    if (ensemble_->members_expose_sigma() && task_ == TaskKind::regression) {
      std::vector<Tensor> sigmas;
      for (const auto& o : outputs) sigmas.push_back(o.risks.at("mve"));
      em = mixture_of_normals(preds, sigmas);
      out.components = GaussianComponents{preds, sigmas};
    } else {
      em = sample_moments(preds);
    }
    for (const auto& m : metrics_) {
      if (m.kind == MetricKind::ensemble) out.risks[m.id()] = em.variance;
    }
    if (!shared) out.prediction = em.mean;
    out.metadata["N"] = std::to_string(ensemble_->size());
    out.metadata["member_seeds"] = join_seeds(ensemble_->seeds());
  }
  return out;
}

nlohmann::json RiskAwareModel::manifest() const {
  nlohmann::json metrics = nlohmann::json::array();
  for (const auto& m : metrics_) metrics.push_back(m.to_json());
  nlohmann::json density = nlohmann::json::object();
  for (const auto& [kind, est] : density_) density[std::string(to_string(kind))] = est.to_json();
  nlohmann::json sampling = nlohmann::json::object();
  if (dropout_) sampling["dropout_samples"] = dropout_->samples;
  for (const auto& m : metrics_) {
    if (m.kind == MetricKind::mve) sampling["mve_samples"] = m.mve.samples;
  }
  nlohmann::json j{{"format", "riskkit-wrapped"},
                   {"version", 1},
                   {"task", to_string(task_)},
                   {"split_index", split_index_},
                   {"seed", seed_},
                   {"steps", steps_},
                   {"architecture", architecture_to_json(source_.specs())},
                   {"metrics", std::move(metrics)},
                   {"sampling_defaults", std::move(sampling)},
                   {"density", std::move(density)},
                   {"annotations", annotations}};
  if (ensemble_) {
    nlohmann::json members = nlohmann::json::array();
    for (std::size_t i = 0; i < ensemble_->size(); ++i) members.push_back("member_" + std::to_string(i));
    j["ensemble_members"] = std::move(members);
  }
  return j;
}

std::vector<std::pair<std::string, Tensor>> RiskAwareModel::named_state() const {
  auto out = source_.named_parameters("model.");
  if (mve_) {
    for (auto& p : mve_->sigma_head.named_parameters("mve.sigma.")) out.push_back(p);
  }
  if (vae_) {
    for (auto& p : vae_->mu_head.named_parameters("vae.mu.")) out.push_back(p);
    for (auto& p : vae_->logvar_head.named_parameters("vae.logvar.")) out.push_back(p);
    for (auto& p : vae_->decoder.named_parameters("vae.decoder.")) out.push_back(p);
  }
  return out;
}

RiskAwareModel wrap(const SequentialModel& model, std::vector<MetricConfig> metrics, const WrapOptions& options) {
  return RiskAwareModel::build(model, std::move(metrics), options, false);
}

TrainingReport train(RiskAwareModel& model, const Examples& data, const TrainConfig& config) {
  return model.train(data, config);
}

RiskOutput predict_with_risk(const RiskAwareModel& model, const Tensor& x, const SamplingOptions& sampling) {
  return model.predict_with_risk(x, sampling);
}

void save_wrapped(const std::filesystem::path& dir, const RiskAwareModel& model) {
  std::filesystem::create_directories(dir);
  write_checkpoint(dir / "params.ckpt", model.named_state(),
                   {{"architecture", architecture_to_json(model.source_.specs())}});
  write_text_file(dir / "manifest.json", model.manifest().dump(2) + "\n");
  if (model.ensemble_) {
    for (std::size_t i = 0; i < model.ensemble_->size(); ++i) {
      save_wrapped(dir / ("member_" + std::to_string(i)), model.ensemble_->member(i));
    }
  }
}

RiskAwareModel load_wrapped(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw DataError("no wrapped model at " + dir.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "riskkit-wrapped") throw DataError(manifest_path.string() + ": not a wrapped-model manifest");
  std::vector<MetricConfig> metrics;
  for (const auto& m : j.at("metrics")) metrics.push_back(MetricConfig::from_json(m));
  const auto model = SequentialModel::from_specs(architecture_from_json(j.at("architecture")), 0);
  RiskAwareModel g = RiskAwareModel::build(
      model, std::move(metrics), WrapOptions{j.at("split_index").get<std::size_t>(), j.at("seed").get<std::uint64_t>()},
      true);
  load_parameters(g.named_state(), read_checkpoint(dir / "params.ckpt"));
  g.steps_ = j.at("steps").get<std::size_t>();
  for (const auto& [name, est] : j.at("density").items()) {
    g.density_[parse_metric_kind(name)] = DensityEstimator::from_json(est);
  }
  g.annotations = j.value("annotations", nlohmann::json::object());
  if (g.ensemble_) {
    for (std::size_t i = 0; i < g.ensemble_->size(); ++i) {
      g.ensemble_->member(i) = load_wrapped(dir / ("member_" + std::to_string(i)));
    }
  }
  return g;
}

}  // namespace riskkit
