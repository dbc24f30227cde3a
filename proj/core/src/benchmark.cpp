#include "riskkit/benchmark.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "riskkit/aleatoric.hpp"
#include "riskkit/errors.hpp"
#include "riskkit/format.hpp"
#include "riskkit/moments.hpp"
#include "riskkit/parallel.hpp"
#include "riskkit/random.hpp"
#include "riskkit/serialization.hpp"

namespace riskkit {
namespace {

using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kModelStream = 1;
constexpr std::uint64_t kWrapStream = 2;
constexpr std::uint64_t kTrainStream = 3;
constexpr std::uint64_t kSampleStream = 4;
constexpr std::uint64_t kCorruptStream = 5;

std::string key(const std::string& name, double value) { return name + "@" + format_double(value); }

std::vector<std::size_t> hidden_or(const BenchmarkConfig& c, std::vector<std::size_t> fallback) {
  return c.hidden.empty() ? fallback : c.hidden;
}

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<double> to_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::size_t train_index_row(const Dataset& ds, std::size_t i) { return ds.train_index[i]; }

bool has_epistemic(const std::vector<MetricConfig>& metrics) {
  return std::any_of(metrics.begin(), metrics.end(), [](const MetricConfig& m) {
    return m.kind == MetricKind::dropout || m.kind == MetricKind::ensemble || m.kind == MetricKind::vae;
  });
}

struct Cell {
  BenchmarkResult result;
  std::vector<std::map<std::string, double>> per_trial;
  std::vector<double> seconds;
};

void finish(Cell& cell, const BenchmarkConfig& config, const BenchmarkOptions& options) {
  auto& r = cell.result;
  r.suite = std::string(to_string(config.suite));
  r.config = config.to_json();
  for (std::size_t t = 0; t < config.trials; ++t) r.trial_seeds.push_back(config.trial_seed(t));
  for (const auto& trial : cell.per_trial) {
    for (const auto& [name, v] : trial) r.trial_values[name].push_back(v);
  }
  for (const auto& [name, values] : r.trial_values) r.metrics[name] = summarize(values);
  if (options.timing) r.wall_clock_seconds = std::accumulate(cell.seconds.begin(), cell.seconds.end(), 0.0);
}

void report(const BenchmarkOptions& options, const std::string& message) {
  if (options.progress) options.progress(message);
}

RiskAwareModel fit(const SequentialModel& model, const std::vector<MetricConfig>& metrics, const Examples& train,
                   const BenchmarkConfig& config, std::uint64_t trial_seed) {
  RiskAwareModel g = wrap(model, metrics, WrapOptions{std::nullopt, derive_seed(trial_seed, kWrapStream)});
  TrainConfig tc = config.train;
  tc.seed = derive_seed(trial_seed, kTrainStream);
  g.train(train, tc);
  return g;
}

SamplingOptions sampling_for(const BenchmarkConfig& config, std::uint64_t trial_seed) {
  return SamplingOptions{config.samples, derive_seed(trial_seed, kSampleStream)};
}

// ---------------------------------------------------------------- suites

void run_uci(const BenchmarkConfig& config, const BenchmarkOptions& options, BenchmarkOutput& out) {
  std::ostringstream trials_csv;
  trials_csv << "dataset,wrapper,trial,seed,rmse,nll\n";
  for (const auto& spec : config.datasets) {
    for (const auto& wrapper : config.wrappers) {
      const auto metrics = parse_metric_list(wrapper);
      Cell cell;
      cell.result.dataset = spec.name;
      cell.result.wrapper = wrapper;
      cell.per_trial.resize(config.trials);
      cell.seconds.resize(config.trials);
      parallel_for(config.trials, [&](std::size_t t) {
        const auto start = Clock::now();
        const std::uint64_t seed = config.trial_seed(t);
        const Dataset ds = load_csv_regression(config.resolve(spec.path), spec.target, config.split_fraction, seed);
        const auto model = SequentialModel::mlp(ds.input_dim(), hidden_or(config, {50}), ds.output_dim(),
                                                derive_seed(seed, kModelStream));
        const auto g = fit(model, metrics, ds.train(), config, seed);
        const Examples test = ds.test();
        const RiskOutput o = g.predict_with_risk(test.x, sampling_for(config, seed));
        const Tensor y_raw = ds.y_norm.invert(test.y);
        auto& values = cell.per_trial[t];
        const auto pred = gaussian_predictive(o);
        values["rmse"] = rmse(ds.y_norm.invert(pred ? pred->first : o.prediction), y_raw);
        if (pred) values["nll"] = nll_gaussian(ds.y_norm.invert(pred->first), ds.y_norm.invert_scale(pred->second), y_raw);
        cell.seconds[t] = seconds_since(start);
      });
      for (std::size_t t = 0; t < config.trials; ++t) {
        const auto& v = cell.per_trial[t];
        trials_csv << spec.name << ',' << wrapper << ',' << t << ',' << config.trial_seed(t) << ','
                   << format_double(v.at("rmse")) << ',' << (v.count("nll") ? format_double(v.at("nll")) : "")
                   << '\n';
      }
      finish(cell, config, options);
      report(options, spec.name + " / " + wrapper + " done");
      out.results.push_back(std::move(cell.result));
    }
  }
  out.figures["uci_trials.csv"] = trials_csv.str();
}

void run_cubic(const BenchmarkConfig& config, const BenchmarkOptions& options, BenchmarkOutput& out) {
  for (const auto& wrapper : config.wrappers) {
    const auto metrics = parse_metric_list(wrapper);
    Cell cell;
    cell.result.dataset = "cubic";
    cell.result.wrapper = wrapper;
    cell.per_trial.resize(config.trials);
    cell.seconds.resize(config.trials);
    std::string figure;
    parallel_for(config.trials, [&](std::size_t t) {
      const auto start = Clock::now();
      const std::uint64_t seed = config.trial_seed(t);
      const Dataset ds = make_cubic(config.n_train, config.n_test, seed, config.cubic);
      const auto model = SequentialModel::mlp(1, hidden_or(config, {64, 64}), 1, derive_seed(seed, kModelStream));
      const auto g = fit(model, metrics, ds.train(), config, seed);
      const Examples test = ds.test();
      const RiskOutput o = g.predict_with_risk(test.x, sampling_for(config, seed));
      const auto x = to_vector(ds.x_norm.invert(test.x));
      const auto risk = to_vector(risk_summary(primary_risk(o, metrics)));
      auto& values = cell.per_trial[t];
      if (has_epistemic(metrics)) {
        std::vector<double> inner, outer;
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double a = std::abs(x[i]);
          if (a <= 3.0) inner.push_back(risk[i]);
          if (a >= 4.5 && a <= 6.0) outer.push_back(risk[i]);
        }
        values["inner_mean_risk"] = mean_of(inner);
        values["outer_mean_risk"] = mean_of(outer);
        values["epistemic_ratio"] = mean_of(outer) / mean_of(inner);
      }
      if (auto it = o.risks.find("mve"); it != o.risks.end()) {
        const auto sigma = to_vector(risk_summary(it->second));
        const auto arg = std::max_element(sigma.begin(), sigma.end()) - sigma.begin();
        values["sigma_argmax_x"] = x[static_cast<std::size_t>(arg)];
      }
      const Tensor y_hat = ds.y_norm.invert(o.prediction);
      values["rmse"] = rmse(y_hat, ds.y_norm.invert(test.y));
      if (t == 0) {
        const auto y = to_vector(ds.y_norm.invert(test.y));
        const auto yh = to_vector(y_hat);
        std::vector<double> band(x.size(), 0.0);
        if (const auto pred = gaussian_predictive(o)) {
          band = to_vector(ds.y_norm.invert_scale(pred->second));
        } else {
          for (const auto& m : metrics) {
            if (m.kind == MetricKind::dropout || m.kind == MetricKind::ensemble) {
              Tensor sd = o.risks.at(m.id());
              std::vector<double> s(sd.values().begin(), sd.values().end());
              for (auto& v : s) v = std::sqrt(std::max(0.0, v));
              band = to_vector(ds.y_norm.invert_scale(Tensor(sd.shape(), s)));
              break;
            }
          }
        }
        std::ostringstream csv;
        csv << "x,y,y_hat,risk,lower,upper\n";
        for (std::size_t i = 0; i < x.size(); ++i) {
          csv << format_double(x[i]) << ',' << format_double(y[i]) << ',' << format_double(yh[i]) << ','
              << format_double(risk[i]) << ',' << format_double(yh[i] - 2.0 * band[i]) << ','
              << format_double(yh[i] + 2.0 * band[i]) << '\n';
        }
        figure = csv.str();
      }
      cell.seconds[t] = seconds_since(start);
    });
    std::string file = "cubic_" + wrapper + ".csv";
    for (char& c : file) {
      if (c == '(' || c == ')' || c == '+' || c == ':') c = '_';
    }
    out.figures[file] = figure;
    finish(cell, config, options);
    report(options, "cubic / " + wrapper + " done");
    out.results.push_back(std::move(cell.result));
  }
}

void run_mislabel(const BenchmarkConfig& config, const BenchmarkOptions& options, BenchmarkOutput& out) {
  Dataset base = load_idx_images(config.resolve(config.images), config.resolve(config.labels));
  if (config.per_class > 0) base = take_per_class(base, config.per_class);
  std::vector<double> sweep = config.probabilities;
  if (std::find(sweep.begin(), sweep.end(), config.headline_probability) == sweep.end()) {
    sweep.push_back(config.headline_probability);
  }
  std::sort(sweep.begin(), sweep.end());
  std::ostringstream csv;
  csv << "wrapper,trial,p,class,mean_aleatoric,count\n";
  for (const auto& wrapper : config.wrappers) {
    const auto metrics = parse_metric_list(wrapper);
    Cell cell;
    cell.result.dataset = base.name;
    cell.result.wrapper = wrapper;
    cell.per_trial.resize(config.trials);
    cell.seconds.resize(config.trials);
    // [trial][p][class] -> (mean, count)
    std::vector<std::vector<std::vector<std::pair<double, std::size_t>>>> per_class(config.trials);
    parallel_for(config.trials, [&](std::size_t t) {
      const auto start = Clock::now();
      const std::uint64_t seed = config.trial_seed(t);
      auto& values = cell.per_trial[t];
      per_class[t].resize(sweep.size());
      for (std::size_t pi = 0; pi < sweep.size(); ++pi) {
        const double p = sweep[pi];
        const CorruptionSpec spec{config.source_class, config.target_class, p, derive_seed(seed, kCorruptStream)};
        const auto [ds, mask] = corrupt_labels(base, spec);
        const auto model = SequentialModel::mlp(ds.input_dim(), hidden_or(config, {128}), ds.num_classes,
                                                derive_seed(seed, kModelStream), true);
        const Examples train = ds.train();
        const auto g = fit(model, metrics, train, config, seed);
        const auto score = to_vector(aleatoric_score(g, train.x).summary);
        // Grouped by the true (uncorrupted) class.
        std::vector<double> sum(ds.num_classes, 0.0);
        std::vector<std::size_t> count(ds.num_classes, 0);
        for (std::size_t i = 0; i < score.size(); ++i) {
          const std::size_t c = base.labels[base.train_index[i]];
          sum[c] += score[i];
          ++count[c];
        }
        for (std::size_t c = 0; c < ds.num_classes; ++c) {
          per_class[t][pi].emplace_back(count[c] ? sum[c] / static_cast<double>(count[c]) : 0.0, count[c]);
        }
        values[key("source_class_mean_aleatoric", p)] = per_class[t][pi][config.source_class].first;
        values[key("target_class_mean_aleatoric", p)] = per_class[t][pi][config.target_class].first;
        // Grouped by the observed label, as seen by someone cleaning the data.
        double labeled_sum = 0.0;
        std::size_t labeled_count = 0;
        for (std::size_t i = 0; i < score.size(); ++i) {
          if (train.labels[i] != config.target_class) continue;
          labeled_sum += score[i];
          ++labeled_count;
        }
        values[key("labeled_target_mean_aleatoric", p)] =
            labeled_count ? labeled_sum / static_cast<double>(labeled_count) : 0.0;
        if (p == config.headline_probability) {
          std::vector<std::size_t> labeled_target;
          std::size_t corrupted = 0;
          for (std::size_t i = 0; i < score.size(); ++i) {
            if (train.labels[i] == config.target_class) labeled_target.push_back(i);
            if (mask[train_index_row(ds, i)]) ++corrupted;
          }
          std::stable_sort(labeled_target.begin(), labeled_target.end(),
                           [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
          const std::size_t k = std::min(corrupted, labeled_target.size());
          std::size_t hits = 0;
          for (std::size_t r = 0; r < k; ++r) hits += mask[train_index_row(ds, labeled_target[r])] ? 1 : 0;
          values["corrupted_count"] = static_cast<double>(corrupted);
          values["precision_at_k"] = k ? static_cast<double>(hits) / static_cast<double>(k) : 0.0;
        }
        report(options, "mislabel / " + wrapper + " trial " + std::to_string(t) + " p=" + format_double(p));
      }
      cell.seconds[t] = seconds_since(start);
    });
    for (std::size_t t = 0; t < config.trials; ++t) {
      for (std::size_t pi = 0; pi < sweep.size(); ++pi) {
        for (std::size_t c = 0; c < per_class[t][pi].size(); ++c) {
          csv << wrapper << ',' << t << ',' << format_double(sweep[pi]) << ',' << c << ','
              << format_double(per_class[t][pi][c].first) << ',' << per_class[t][pi][c].second << '\n';
        }
      }
    }
    finish(cell, config, options);
    out.results.push_back(std::move(cell.result));
  }
  out.figures["mislabel_sweep.csv"] = csv.str();
}

void run_ood(const BenchmarkConfig& config, const BenchmarkOptions& options, BenchmarkOutput& out) {
  std::ostringstream csv;
  csv << "wrapper,trial,set,risk\n";
  for (const auto& wrapper : config.wrappers) {
    const auto metrics = parse_metric_list(wrapper);
    Cell cell;
    cell.result.dataset = "shifted_tabular";
    cell.result.wrapper = wrapper;
    cell.per_trial.resize(config.trials);
    cell.seconds.resize(config.trials);
    std::vector<std::pair<std::vector<double>, std::vector<double>>> scores(config.trials);
    parallel_for(config.trials, [&](std::size_t t) {
      const auto start = Clock::now();
      const std::uint64_t seed = config.trial_seed(t);
      const ShiftedData data = make_shifted_tabular(config.n_train, config.n_test, config.n_ood, seed, config.shift);
      const Dataset& ds = data.in_distribution;
      const auto model = SequentialModel::mlp(ds.input_dim(), hidden_or(config, {64, 64}), ds.output_dim(),
                                              derive_seed(seed, kModelStream));
      const auto g = fit(model, metrics, ds.train(), config, seed);
      const auto sampling = sampling_for(config, seed);
      const auto id = to_vector(risk_summary(primary_risk(g.predict_with_risk(ds.test().x, sampling), metrics)));
      const auto ood = to_vector(
          risk_summary(primary_risk(g.predict_with_risk(data.out_of_distribution.x, sampling), metrics)));
      auto& values = cell.per_trial[t];
      values["auc"] = auc_roc(id, ood);
      values["id_mean_risk"] = mean_of(id);
      values["ood_mean_risk"] = mean_of(ood);
      scores[t] = {id, ood};
      cell.seconds[t] = seconds_since(start);
    });
    for (std::size_t t = 0; t < config.trials; ++t) {
      for (double v : scores[t].first) csv << wrapper << ',' << t << ",id," << format_double(v) << '\n';
      for (double v : scores[t].second) csv << wrapper << ',' << t << ",ood," << format_double(v) << '\n';
    }
    finish(cell, config, options);
    report(options, "ood / " + wrapper + " done");
    out.results.push_back(std::move(cell.result));
  }
  out.figures["ood_scores.csv"] = csv.str();
}

void run_adversarial(const BenchmarkConfig& config, const BenchmarkOptions& options, BenchmarkOutput& out) {
  std::ostringstream csv;
  csv << "wrapper,epsilon,auc_mean,auc_std,trials\n";
  for (const auto& wrapper : config.wrappers) {
    const auto metrics = parse_metric_list(wrapper);
    Cell cell;
    cell.result.dataset = "shifted_tabular";
    cell.result.wrapper = wrapper;
    cell.per_trial.resize(config.trials);
    cell.seconds.resize(config.trials);
    parallel_for(config.trials, [&](std::size_t t) {
      const auto start = Clock::now();
      const std::uint64_t seed = config.trial_seed(t);
      const ShiftedData data = make_shifted_tabular(config.n_train, config.n_test, config.n_ood, seed, config.shift);
      const Dataset& ds = data.in_distribution;
      const auto model = SequentialModel::mlp(ds.input_dim(), hidden_or(config, {64, 64}), ds.output_dim(),
                                              derive_seed(seed, kModelStream));
      const auto g = fit(model, metrics, ds.train(), config, seed);
      const Examples test = ds.test();
      const auto sampling = sampling_for(config, seed);
      const auto clean = to_vector(risk_summary(primary_risk(g.predict_with_risk(test.x, sampling), metrics)));
      auto& values = cell.per_trial[t];
      for (double eps : config.epsilons) {
        const Tensor adv = fgsm_perturb(g, test.x, test.y, eps, config.clamp);
        const auto perturbed = to_vector(risk_summary(primary_risk(g.predict_with_risk(adv, sampling), metrics)));
        values[key("auc", eps)] = auc_roc(clean, perturbed);
        values[key("perturbed_task_loss", eps)] = g.task_loss(adv, test.y).item();
      }
      cell.seconds[t] = seconds_since(start);
    });
    finish(cell, config, options);
    for (double eps : config.epsilons) {
      const auto& s = cell.result.metrics.at(key("auc", eps));
      csv << wrapper << ',' << format_double(eps) << ',' << format_double(s.mean) << ','
          << (s.stddev ? format_double(*s.stddev) : "") << ',' << s.count << '\n';
    }
    report(options, "adversarial / " + wrapper + " done");
    out.results.push_back(std::move(cell.result));
  }
  out.figures["adversarial_sweep.csv"] = csv.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

}  // namespace

// ---------------------------------------------------------------- config

std::string_view to_string(Suite suite) {
  switch (suite) {
    case Suite::cubic:
      return "cubic";
    case Suite::uci:
      return "uci";
    case Suite::mislabel:
      return "mislabel";
    case Suite::ood:
      return "ood";
    case Suite::adversarial:
      return "adversarial";
  }
  return "unknown";
}

Suite parse_suite(std::string_view name) {
  for (Suite s : {Suite::cubic, Suite::uci, Suite::mislabel, Suite::ood, Suite::adversarial}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown benchmark suite '" + std::string(name) + "'");
}

BenchmarkConfig BenchmarkConfig::defaults(Suite suite) {
  BenchmarkConfig c;
  c.suite = suite;
  c.train.batch_size = 32;
  c.train.optimizer.kind = OptimizerKind::adam;
  c.train.optimizer.learning_rate = 1e-3;
  switch (suite) {
    case Suite::uci:
      c.train.epochs = 100;
      c.hidden = {50};
      c.wrappers = {"ensemble:5(mve)", "dropout+mve", "vae+mve"};
      break;
    case Suite::cubic:
      c.train.epochs = 500;
      c.hidden = {64, 64};
      c.wrappers = {"dropout", "ensemble", "vae", "mve"};
      break;
    case Suite::mislabel:
      c.train.epochs = 10;
      c.hidden = {128};
      c.wrappers = {"mve"};
      c.trials = 1;
      break;
    case Suite::ood:
      c.train.epochs = 100;
      c.hidden = {64, 64};
      c.wrappers = {"dropout", "ensemble", "vae"};
      break;
    case Suite::adversarial:
      c.train.epochs = 100;
      c.hidden = {64, 64};
      c.wrappers = {"ensemble"};
      break;
  }
  return c;
}

BenchmarkConfig BenchmarkConfig::from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ConfigError("benchmark config must be a JSON object");
  if (!j.contains("suite")) throw ConfigError("benchmark config is missing 'suite'");
  BenchmarkConfig c;
  try {
    c = defaults(parse_suite(j.at("suite").get<std::string>()));
    c.base_dir = base_dir;
    c.trials = j.value("trials", c.trials);
    c.seed = j.value("seed", c.seed);
    if (j.contains("wrappers")) c.wrappers = j.at("wrappers").get<std::vector<std::string>>();
    if (j.contains("model")) c.hidden = j.at("model").value("hidden", c.hidden);
    if (j.contains("train")) {
      nlohmann::json merged = c.train.to_json();
      merged.update(j.at("train"));
      c.train = TrainConfig::from_json(merged);
    }
    if (j.contains("sampling") && j.at("sampling").contains("samples")) {
      c.samples = j.at("sampling").at("samples").get<std::size_t>();
    }
    const nlohmann::json d = j.value("data", nlohmann::json::object());
    c.split_fraction = d.value("split_fraction", c.split_fraction);
    if (d.contains("datasets")) {
      for (const auto& e : d.at("datasets")) {
        c.datasets.push_back({e.at("name").get<std::string>(), e.at("path").get<std::string>(),
                              e.at("target").get<std::string>()});
      }
    }
    c.n_train = d.value("n_train", c.n_train);
    c.n_test = d.value("n_test", c.n_test);
    c.n_ood = d.value("n_ood", c.n_ood);
    if (d.contains("form")) {
      const auto form = d.at("form").get<std::string>();
      if (form == "cubic") {
        c.cubic.form = CubicForm::cubic;
      } else if (form == "linear") {
        c.cubic.form = CubicForm::linear;
      } else {
        throw ConfigError("cubic form must be 'cubic' or 'linear'");
      }
    }
    c.cubic.noise_scale = d.value("noise_scale", c.cubic.noise_scale);
    c.images = d.value("images", c.images);
    c.labels = d.value("labels", c.labels);
    c.per_class = d.value("per_class", c.per_class);
    c.source_class = d.value("source_class", c.source_class);
    c.target_class = d.value("target_class", c.target_class);
    c.probabilities = d.value("probabilities", c.probabilities);
    c.headline_probability = d.value("headline_probability", c.headline_probability);
    c.shift.dim = d.value("dim", c.shift.dim);
    c.shift.shift = d.value("shift", c.shift.shift);
    c.shift.noise = d.value("noise", c.shift.noise);
    c.epsilons = d.value("epsilons", c.epsilons);
    if (d.contains("clamp")) {
      const auto r = d.at("clamp").get<std::vector<double>>();
      if (r.size() != 2) throw ConfigError("clamp must be [lo, hi]");
      c.clamp = {r[0], r[1]};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed benchmark config: ") + e.what());
  }
  return c;
}

BenchmarkConfig BenchmarkConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

std::filesystem::path BenchmarkConfig::resolve(const std::string& path) const {
  const std::filesystem::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

std::uint64_t BenchmarkConfig::trial_seed(std::size_t trial) const { return derive_seed(seed, trial); }

void BenchmarkConfig::validate() const {
  if (trials == 0) throw ConfigError("trials must be at least 1");
  if (wrappers.empty()) throw ConfigError("no wrappers listed");
  train.validate();
  for (const auto& w : wrappers) {
    const auto metrics = parse_metric_list(w);
    if (metrics.empty()) throw ConfigError("empty wrapper '" + w + "'");
    std::set<MetricKind> kinds;
    for (const auto& m : metrics) {
      m.validate();
      if (!kinds.insert(m.kind).second) {
        throw ConfigError("wrapper '" + w + "' lists '" + std::string(to_string(m.kind)) + "' twice");
      }
    }
  }
  if (samples && *samples == 0) throw ConfigError("sampling.samples must be at least 1");
  switch (suite) {
    case Suite::uci:
      if (datasets.empty()) throw ConfigError("uci suite lists no datasets");
      if (!(split_fraction > 0.0 && split_fraction < 1.0)) throw ConfigError("split_fraction must lie in (0, 1)");
      for (const auto& d : datasets) {
        if (!std::filesystem::exists(resolve(d.path))) {
          throw DataError("dataset '" + d.name + "' not found at " + resolve(d.path).string());
        }
      }
      break;
    case Suite::cubic:
      if (n_train == 0 || n_test < 2) throw ConfigError("cubic needs n_train >= 1 and n_test >= 2");
      break;
    case Suite::mislabel:
      if (source_class == target_class) throw ConfigError("source and target class must differ");
      if (probabilities.empty()) throw ConfigError("mislabel sweep lists no probabilities");
      for (double p : probabilities) {
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("corruption probabilities must lie in [0, 1]");
      }
      if (!(headline_probability >= 0.0 && headline_probability <= 1.0)) {
        throw ConfigError("headline_probability must lie in [0, 1]");
      }
      for (const auto& f : {images, labels}) {
        if (f.empty()) throw ConfigError("mislabel suite needs 'images' and 'labels'");
        if (!std::filesystem::exists(resolve(f))) throw DataError("dataset file not found: " + resolve(f).string());
      }
      break;
    case Suite::ood:
    case Suite::adversarial:
      if (n_train < 2 || n_test < 1 || shift.dim == 0) throw ConfigError("shifted data needs n_train >= 2, n_test >= 1");
      if (suite == Suite::ood && n_ood == 0) throw ConfigError("ood suite needs n_ood >= 1");
      if (suite == Suite::adversarial) {
        if (epsilons.empty()) throw ConfigError("adversarial sweep lists no epsilons");
        for (double e : epsilons) {
          if (!(e >= 0.0) || !std::isfinite(e)) throw ConfigError("epsilons must be finite and >= 0");
        }
        if (!(clamp.lo <= clamp.hi)) throw ConfigError("clamp range is empty");
      }
      break;
  }
}

nlohmann::json BenchmarkConfig::to_json() const {
  nlohmann::json j{{"suite", to_string(suite)},
                   {"trials", trials},
                   {"seed", seed},
                   {"wrappers", wrappers},
                   {"model", {{"hidden", hidden}}},
                   {"train", train.to_json()}};
  j["train"].erase("seed");
  j["sampling"] = samples ? nlohmann::json{{"samples", *samples}} : nlohmann::json::object();
  nlohmann::json d = nlohmann::json::object();
  switch (suite) {
    case Suite::uci: {
      d["split_fraction"] = split_fraction;
      auto list = nlohmann::json::array();
      for (const auto& e : datasets) list.push_back({{"name", e.name}, {"path", e.path}, {"target", e.target}});
      d["datasets"] = std::move(list);
      break;
    }
    case Suite::cubic:
      d = {{"n_train", n_train}, {"n_test", n_test}, {"generator", cubic.to_json()}};
      break;
    case Suite::mislabel:
      d = {{"images", images},
           {"labels", labels},
           {"per_class", per_class},
           {"source_class", source_class},
           {"target_class", target_class},
           {"probabilities", probabilities},
           {"headline_probability", headline_probability}};
      break;
    case Suite::ood:
    case Suite::adversarial:
      d = {{"n_train", n_train}, {"n_test", n_test}, {"dim", shift.dim}, {"shift", shift.shift}, {"noise", shift.noise}};
      if (suite == Suite::ood) d["n_ood"] = n_ood;
      if (suite == Suite::adversarial) {
        d["epsilons"] = epsilons;
        if (std::isfinite(clamp.lo) || std::isfinite(clamp.hi)) d["clamp"] = {clamp.lo, clamp.hi};
      }
      break;
  }
  j["data"] = std::move(d);
  return j;
}

nlohmann::json BenchmarkResult::to_json() const {
  nlohmann::json metric_json = nlohmann::json::object();
  for (const auto& [name, s] : metrics) metric_json[name] = s.to_json();
  auto summary_or_null = [&](const char* name) {
    auto it = metrics.find(name);
    return it == metrics.end() ? nlohmann::json(nullptr) : it->second.to_json();
  };
  return {{"suite", suite},
          {"dataset", dataset},
          {"wrapper", wrapper},
          {"rmse", summary_or_null("rmse")},
          {"nll", summary_or_null("nll")},
          {"metrics", std::move(metric_json)},
          {"trial_values", trial_values},
          {"trial_seeds", trial_seeds},
          {"std_convention", "sample standard deviation over trials"},
          {"wall_clock_seconds", wall_clock_seconds ? nlohmann::json(*wall_clock_seconds) : nlohmann::json(nullptr)},
          {"config", config}};
}

BenchmarkOutput run_benchmark(const BenchmarkConfig& config, const BenchmarkOptions& options) {
  config.validate();
  BenchmarkOutput out;
  out.config = config.to_json();
  switch (config.suite) {
    case Suite::uci:
      run_uci(config, options, out);
      break;
    case Suite::cubic:
      run_cubic(config, options, out);
      break;
    case Suite::mislabel:
      run_mislabel(config, options, out);
      break;
    case Suite::ood:
      run_ood(config, options, out);
      break;
    case Suite::adversarial:
      run_adversarial(config, options, out);
      break;
  }
  return out;
}

std::string results_csv(const std::vector<BenchmarkResult>& results) {
  std::ostringstream csv;
  csv << "suite,dataset,wrapper,metric,mean,std,trials\n";
  for (const auto& r : results) {
    for (const auto& [name, s] : r.metrics) {
      csv << r.suite << ',' << csv_field(r.dataset) << ',' << csv_field(r.wrapper) << ',' << csv_field(name) << ','
          << format_double(s.mean) << ',' << (s.stddev ? format_double(*s.stddev) : "") << ',' << s.count << '\n';
    }
  }
  return csv.str();
}

void write_benchmark(const std::filesystem::path& out_dir, const BenchmarkOutput& output) {
  std::filesystem::create_directories(out_dir);
  auto results = nlohmann::json::array();
  for (const auto& r : output.results) results.push_back(r.to_json());
  const nlohmann::json doc{{"format", "riskkit-benchmark"}, {"version", 1}, {"config", output.config},
                           {"results", std::move(results)}};
  write_text_file(out_dir / "results.json", doc.dump(2) + "\n");
  write_text_file(out_dir / "results.csv", results_csv(output.results));
  for (const auto& [name, contents] : output.figures) write_text_file(out_dir / name, contents);
}

std::optional<std::pair<Tensor, Tensor>> gaussian_predictive(const RiskOutput& output) {
  if (output.components && !output.components->means.empty()) {
    const Moments m = mixture_of_normals(output.components->means, output.components->sigmas);
    std::vector<double> sd(m.variance.values().begin(), m.variance.values().end());
    for (auto& v : sd) v = std::sqrt(std::max(v, kSigmaFloor * kSigmaFloor));
    return std::make_pair(m.mean, Tensor(m.variance.shape(), std::move(sd)));
  }
  if (auto it = output.risks.find("mve"); it != output.risks.end()) {
    return std::make_pair(output.prediction, it->second);
  }
  return std::nullopt;
}

Tensor primary_risk(const RiskOutput& output, const std::vector<MetricConfig>& metrics) {
  for (const auto& m : metrics) {
    if (m.kind == MetricKind::dropout || m.kind == MetricKind::ensemble || m.kind == MetricKind::vae) {
      return output.risks.at(m.id());
    }
  }
  if (metrics.empty()) throw ConfigError("no metrics to score");
  return output.risks.at(metrics.front().id());
}

}  // namespace riskkit
