#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "riskkit/aleatoric.hpp"
#include "riskkit/benchmark.hpp"
#include "riskkit/bias.hpp"
#include "riskkit/data.hpp"
#include "riskkit/errors.hpp"
#include "riskkit/format.hpp"
#include "riskkit/losses.hpp"
#include "riskkit/serialization.hpp"
#include "riskkit/wrapper.hpp"

namespace fs = std::filesystem;
using namespace riskkit;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kDivergence = 4 };

struct Globals {
  std::uint64_t seed = 0;
  std::optional<std::size_t> trials;
  std::string out_dir;
  std::string config;
};

struct DataArgs {
  std::string dataset;
  std::string labels;
  std::string target;
  double split = 0.9;
  std::size_t n_train = 1000;
  std::size_t n_test = 241;
};

nlohmann::json read_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  try {
    auto j = nlohmann::json::parse(read_text_file(path));
    if (!j.is_object()) throw ConfigError(path + ": expected a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Dataset load_dataset(const DataArgs& a, std::uint64_t seed) {
  if (a.dataset.empty()) throw ConfigError("--dataset is required");
  if (a.dataset == "cubic") return make_cubic(a.n_train, a.n_test, seed);
  if (a.dataset == "shifted") return make_shifted_tabular(a.n_train, a.n_test, 1, seed).in_distribution;
  if (ends_with(a.dataset, ".csv")) {
    if (a.target.empty()) throw ConfigError("--target is required for CSV datasets");
    return load_csv_regression(a.dataset, a.target, a.split, seed);
  }
  if (a.labels.empty()) throw ConfigError("--labels is required for IDX image datasets");
  return load_idx_images(a.dataset, a.labels);
}

nlohmann::json data_annotations(const Dataset& ds) {
  return {{"task", to_string(ds.task)},
          {"x_normalization", ds.x_norm.empty() ? nlohmann::json(nullptr) : ds.x_norm.to_json()},
          {"y_normalization", ds.y_norm.empty() ? nlohmann::json(nullptr) : ds.y_norm.to_json()},
          {"dataset", ds.manifest()}};
}

fs::path out_dir_or(const Globals& g, const std::string& fallback) {
  return g.out_dir.empty() ? fs::path(fallback) : fs::path(g.out_dir);
}

// Plain supervised training of an unwrapped model.
std::vector<double> train_plain(const SequentialModel& model, const Examples& data, const TrainConfig& cfg) {
  const bool classifier = model.layers().back().spec.kind == LayerKind::softmax_output;
  const SequentialModel net = classifier ? model.slice(0, model.size() - 1) : model;
  Optimizer opt(cfg.optimizer, model.parameters());
  std::vector<double> curve;
  const std::size_t n = data.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::uint64_t epoch_seed = derive_seed(cfg.seed, epoch);
    const auto order = shuffled_indices(n, derive_seed(epoch_seed, 1));
    double sum = 0.0;
    std::size_t b = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++b) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      const Examples batch = data.subset(std::span<const std::size_t>(order.data() + start, end - start));
      Rng rng(derive_seed(epoch_seed, 2 + b));
      const Tensor out = net.forward(batch.x, Mode::train, false, rng);
      const Tensor loss = classifier ? softmax_cross_entropy(out, batch.y) : mse(out, batch.y);
      const double v = loss.item();
      if (!std::isfinite(v)) {
        throw DivergenceError("loss became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                                  std::to_string(b),
                              epoch, b);
      }
      loss.backward();
      opt.step();
      sum += v * static_cast<double>(end - start);
    }
    curve.push_back(sum / static_cast<double>(n));
  }
  return curve;
}

TrainConfig train_config_from(const nlohmann::json& cfg, std::optional<std::size_t> epochs,
                              std::optional<double> lr, std::optional<std::size_t> batch, std::uint64_t seed) {
  TrainConfig tc = TrainConfig::from_json(cfg.value("train", nlohmann::json::object()));
  if (epochs) tc.epochs = *epochs;
  if (lr) tc.optimizer.learning_rate = *lr;
  if (batch) tc.batch_size = *batch;
  tc.seed = derive_seed(seed, 3);
  tc.validate();
  return tc;
}

struct TrainArgs {
  DataArgs data;
  std::string wrappers;
  std::string resume;
  std::vector<std::size_t> hidden;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::size_t> batch;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  const auto cfg = read_config(g.config);
  DataArgs d = a.data;
  if (d.dataset.empty() && cfg.contains("dataset")) d.dataset = cfg.at("dataset").get<std::string>();
  if (d.target.empty()) d.target = cfg.value("target", std::string());
  const Dataset ds = load_dataset(d, g.seed);
  const Examples train = ds.train();
  const TrainConfig tc = train_config_from(cfg, a.epochs, a.lr, a.batch, g.seed);
  std::vector<std::size_t> hidden = a.hidden;
  if (hidden.empty() && cfg.contains("model")) hidden = cfg.at("model").value("hidden", hidden);
  if (hidden.empty()) hidden = {50};
  std::string wrappers = a.wrappers;
  if (wrappers.empty()) wrappers = cfg.value("wrappers", std::string());

  const fs::path out = out_dir_or(g, "riskkit_model");
  fs::create_directories(out);
  write_text_file(out / "dataset.json", ds.manifest().dump(2) + "\n");

  if (!a.resume.empty()) {
    RiskAwareModel m = load_wrapped(a.resume);
    const auto report = m.train(train, tc);
    m.annotations["data"] = data_annotations(ds);
    save_wrapped(out, m);
    write_text_file(out / "training.json", report.to_json().dump(2) + "\n");
    std::cout << "trained " << m.steps() << " steps; wrapped model in " << out.string() << "\n";
    return kOk;
  }

  const bool classifier = ds.task == TaskKind::classification;
  const auto model = SequentialModel::mlp(ds.input_dim(), hidden, classifier ? ds.num_classes : ds.output_dim(),
                                          derive_seed(g.seed, 1), classifier);
  if (wrappers.empty()) {
    const auto curve = train_plain(model, train, tc);
    save_model(out / "model.ckpt", model);
    write_text_file(out / "training.json", nlohmann::json{{"loss", curve}, {"config", tc.to_json()}}.dump(2) + "\n");
    write_text_file(out / "data.json", data_annotations(ds).dump(2) + "\n");
    std::cout << "final training loss " << format_double(curve.empty() ? 0.0 : curve.back()) << "; model in "
              << (out / "model.ckpt").string() << "\n";
    return kOk;
  }
  RiskAwareModel m = wrap(model, parse_metric_list(wrappers), WrapOptions{std::nullopt, derive_seed(g.seed, 2)});
  const auto report = m.train(train, tc);
  m.annotations["data"] = data_annotations(ds);
  save_wrapped(out, m);
  write_text_file(out / "training.json", report.to_json().dump(2) + "\n");
  std::cout << "wrapped [" << wrappers << "], " << report.steps << " shared steps";
  if (!report.total_loss.empty()) std::cout << ", final loss " << format_double(report.total_loss.back());
  std::cout << "; wrapped model in " << out.string() << "\n";
  return kOk;
}

int cmd_wrap(const Globals& g, const std::string& checkpoint, const std::string& metrics) {
  const auto cfg = read_config(g.config);
  std::string spec = metrics.empty() ? cfg.value("wrappers", std::string()) : metrics;
  if (spec.empty()) throw ConfigError("--metrics is required");
  if (!fs::exists(checkpoint)) throw DataError("checkpoint not found: " + checkpoint);
  const SequentialModel model = load_model(checkpoint);
  RiskAwareModel m = wrap(model, parse_metric_list(spec), WrapOptions{std::nullopt, derive_seed(g.seed, 2)});
  const fs::path data_json = fs::path(checkpoint).parent_path() / "data.json";
  if (fs::exists(data_json)) m.annotations["data"] = nlohmann::json::parse(read_text_file(data_json));
  const fs::path out = out_dir_or(g, "riskkit_wrapped");
  save_wrapped(out, m);
  std::cout << "wrapped " << checkpoint << " with [" << spec << "]; manifest in " << (out / "manifest.json").string()
            << "\n";
  return kOk;
}

Standardizer annotation_norm(const RiskAwareModel& m, const char* key) {
  if (!m.annotations.contains("data")) return {};
  return Standardizer::from_json(m.annotations.at("data").value(key, nlohmann::json(nullptr)));
}

int cmd_score(const Globals& g, const std::string& model_dir, const std::string& input, const std::string& target,
              std::optional<std::size_t> samples) {
  const RiskAwareModel m = load_wrapped(model_dir);
  const CsvTable table = read_numeric_csv(input);
  if (table.rows.empty()) throw DataError(input + ": no data rows");
  std::size_t drop = table.header.size();
  if (!target.empty()) {
    for (std::size_t j = 0; j < table.header.size(); ++j) {
      if (table.header[j] == target) drop = j;
    }
    if (drop == table.header.size()) throw DataError(input + ": no column named '" + target + "'");
  }
  std::vector<double> values;
  std::size_t cols = 0;
  for (const auto& row : table.rows) {
    cols = 0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j == drop) continue;
      values.push_back(row[j]);
      ++cols;
    }
  }
  if (cols != m.source().input_dim()) {
    throw DataError(input + ": " + std::to_string(cols) + " feature columns, model expects " +
                    std::to_string(m.source().input_dim()));
  }
  const Standardizer xn = annotation_norm(m, "x_normalization");
  const Standardizer yn = annotation_norm(m, "y_normalization");
  const Tensor x = xn.apply(Tensor::matrix(table.rows.size(), cols, std::move(values)));
  const RiskOutput o = m.predict_with_risk(x, SamplingOptions{samples, derive_seed(g.seed, 4)});
  const Tensor pred = m.task() == TaskKind::regression ? yn.invert(o.prediction) : o.prediction;

  // Spread risks are reported in target units for regression.
  std::map<std::string, Tensor> columns;
  for (const auto& [id, r] : o.risks) {
    Tensor v = r;
    if (m.task() == TaskKind::regression && !yn.empty() && r.shape().size() == 2 && r.cols() == yn.mean.size()) {
      if (id == "mve") {
        v = yn.invert_scale(r);
      } else if (id == "dropout" || id.rfind("ensemble", 0) == 0) {
        v = yn.invert_scale(yn.invert_scale(r));
      }
    }
    columns[id] = risk_summary(v);
  }
  std::ostringstream csv;
  csv << "index";
  for (std::size_t j = 0; j < pred.cols(); ++j) csv << ",prediction_" << j;
  for (const auto& [id, _] : columns) csv << ',' << id;
  csv << '\n';
  for (std::size_t i = 0; i < pred.rows(); ++i) {
    csv << i;
    for (std::size_t j = 0; j < pred.cols(); ++j) csv << ',' << format_double(pred.at(i, j));
    for (const auto& [id, c] : columns) csv << ',' << format_double(c.at(i));
    csv << '\n';
  }
  const fs::path out = out_dir_or(g, "riskkit_scores");
  fs::create_directories(out);
  write_text_file(out / "risk.csv", csv.str());
  nlohmann::json meta(o.metadata);
  write_text_file(out / "risk_metadata.json", meta.dump(2) + "\n");
  std::cout << "scored " << pred.rows() << " rows";
  for (const auto& [id, c] : columns) {
    double s = 0.0;
    for (double v : c.values()) s += v;
    std::cout << "; mean " << id << " " << format_double(s / static_cast<double>(c.numel()));
  }
  std::cout << "\nwrote " << (out / "risk.csv").string() << "\n";
  return kOk;
}

int cmd_audit(const Globals& g, const std::string& model_dir, const DataArgs& d, std::size_t top) {
  const RiskAwareModel m = load_wrapped(model_dir);
  const Dataset ds = load_dataset(d, g.seed);
  const Examples rows = ds.train();
  const fs::path out = out_dir_or(g, "riskkit_audit");
  fs::create_directories(out);
  nlohmann::json summary{{"dataset", ds.manifest()}, {"rows", rows.size()}};

  const DensityEstimator* est = m.density(MetricKind::histogram_bias);
  if (!est) est = m.density(MetricKind::kde_bias);
  std::optional<DensityEstimator> fitted;
  if (!est) {
    fitted = fit_density(m.bias_features(rows.x), DensityKind::histogram);
    est = &*fitted;
  }
  const BiasReport bias = bias_percentiles(*est, m.bias_features(rows.x), 0.01);
  write_text_file(out / "bias_report.csv", bias_report_csv(bias));
  std::vector<std::size_t> order(bias.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return bias.scores[a] < bias.scores[b]; });
  auto rare = nlohmann::json::array();
  for (std::size_t r = 0; r < std::min(top, order.size()); ++r) {
    rare.push_back({{"index", order[r]}, {"score", bias.scores[order[r]]}, {"percentile", bias.percentiles[order[r]]}});
  }
  summary["density"] = to_string(est->kind());
  summary["least_represented"] = std::move(rare);
  std::cout << "bias report: " << bias.scores.size() << " rows, density " << to_string(est->kind()) << "\n";

  if (m.mve_head()) {
    const auto score = aleatoric_score(m, rows.x).summary;
    std::vector<std::size_t> rank(score.numel());
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return score.at(a) > score.at(b); });
    std::ostringstream csv;
    csv << "rank,index,label,aleatoric\n";
    for (std::size_t r = 0; r < rank.size(); ++r) {
      csv << r << ',' << rank[r] << ',' << (rows.labels.empty() ? std::string() : std::to_string(rows.labels[rank[r]]))
          << ',' << format_double(score.at(rank[r])) << '\n';
    }
    write_text_file(out / "mislabel_ranking.csv", csv.str());
    auto suspects = nlohmann::json::array();
    for (std::size_t r = 0; r < std::min(top, rank.size()); ++r) {
      suspects.push_back({{"index", rank[r]}, {"aleatoric", score.at(rank[r])}});
    }
    summary["highest_aleatoric"] = std::move(suspects);
    std::cout << "mislabel ranking: top " << std::min(top, rank.size()) << " of " << rank.size()
              << " rows by aleatoric score\n";
  }
  write_text_file(out / "audit.json", summary.dump(2) + "\n");
  std::cout << "wrote " << out.string() << "\n";
  return kOk;
}

int cmd_benchmark(const Globals& g, const std::string& suite, bool seed_given, bool timing) {
  fs::path config_path = g.config;
  if (config_path.empty()) config_path = fs::path(RISKKIT_CONFIG_DIR) / (suite + ".json");
  BenchmarkConfig cfg = BenchmarkConfig::load(config_path);
  if (!suite.empty() && parse_suite(suite) != cfg.suite) {
    throw ConfigError("config " + config_path.string() + " is for suite '" + std::string(to_string(cfg.suite)) + "'");
  }
  if (g.trials) cfg.trials = *g.trials;
  if (seed_given) cfg.seed = g.seed;
  BenchmarkOptions options;
  options.timing = timing;
  options.progress = [](const std::string& s) { std::cerr << "  " << s << "\n"; };
  const auto output = run_benchmark(cfg, options);
  const fs::path out = out_dir_or(g, "results/" + std::string(to_string(cfg.suite)));
  write_benchmark(out, output);
  for (const auto& r : output.results) {
    std::cout << r.dataset << "  " << r.wrapper << "\n";
    for (const auto& [name, s] : r.metrics) {
      std::cout << "    " << name << " = " << format_double(s.mean);
      if (s.stddev) std::cout << " ± " << format_double(*s.stddev) << " (std over " << s.count << " trials)";
      std::cout << "\n";
    }
  }
  std::cout << "wrote " << out.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"riskkit: risk-aware model wrappers, scoring and benchmarks"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::size_t trials = 0;
  auto* seed_opt = app.add_option("--seed", g.seed, "Base random seed");
  app.add_option("--trials", trials, "Trials per benchmark cell")->check(CLI::PositiveNumber);
  app.add_option("--out-dir", g.out_dir, "Output directory");
  app.add_option("--config", g.config, "JSON configuration file");

  TrainArgs ta;
  std::size_t epochs = 0, batch = 0;
  double lr = 0.0;
  auto add_data = [](CLI::App* c, DataArgs& d) {
    c->add_option("--dataset", d.dataset, "cubic | shifted | file.csv | images.idx3-ubyte");
    c->add_option("--labels", d.labels, "IDX label file for image datasets");
    c->add_option("--target", d.target, "Target column (CSV)");
    c->add_option("--split", d.split, "Train fraction (CSV)")->check(CLI::Range(0.0, 1.0));
    c->add_option("--n-train", d.n_train, "Rows for synthetic datasets");
    c->add_option("--n-test", d.n_test, "Test rows for synthetic datasets");
  };
  auto* train = app.add_subcommand("train", "Train a model (optionally wrapped) on a dataset");
  add_data(train, ta.data);
  train->add_option("--wrappers", ta.wrappers, "Metric list, e.g. 'ensemble(mve)' or 'dropout+mve'");
  train->add_option("--resume", ta.resume, "Continue training a wrapped model directory");
  train->add_option("--hidden", ta.hidden, "Hidden layer widths")->delimiter(',');
  auto* epochs_opt = train->add_option("--epochs", epochs, "Training epochs");
  auto* lr_opt = train->add_option("--lr", lr, "Learning rate");
  auto* batch_opt = train->add_option("--batch-size", batch, "Mini-batch size");

  std::string checkpoint, metrics;
  auto* wrap_cmd = app.add_subcommand("wrap", "Wrap a trained checkpoint with risk metrics");
  wrap_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint (model.ckpt)")->required();
  wrap_cmd->add_option("--metrics", metrics, "Metric list");

  std::string model_dir, input, score_target;
  std::size_t samples = 0;
  auto* score = app.add_subcommand("score", "Score an input CSV with a wrapped model");
  score->add_option("--model", model_dir, "Wrapped model directory")->required();
  score->add_option("--input", input, "Feature CSV with header")->required();
  score->add_option("--target", score_target, "Column to ignore (e.g. the label)");
  auto* samples_opt = score->add_option("--samples", samples, "Override the sample count T");

  DataArgs audit_data;
  std::size_t top = 20;
  auto* audit = app.add_subcommand("audit", "Bias report and mislabel ranking for a dataset");
  audit->add_option("--model", model_dir, "Wrapped model directory")->required();
  add_data(audit, audit_data);
  audit->add_option("--top", top, "Rows listed in the summary");

  std::string suite;
  bool timing = false;
  auto* bench = app.add_subcommand("benchmark", "Run a benchmark suite");
  bench->add_option("suite", suite, "cubic | uci | mislabel | ood | adversarial")->required();
  bench->add_flag("--timing", timing, "Record wall-clock seconds in results");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }
  if (trials > 0) g.trials = trials;

  try {
    if (*train) {
      if (*epochs_opt) ta.epochs = epochs;
      if (*lr_opt) ta.lr = lr;
      if (*batch_opt) ta.batch = batch;
      return cmd_train(g, ta);
    }
    if (*wrap_cmd) return cmd_wrap(g, checkpoint, metrics);
    if (*score) return cmd_score(g, model_dir, input, score_target, *samples_opt ? std::optional(samples) : std::nullopt);
    if (*audit) return cmd_audit(g, model_dir, audit_data, top);
    if (*bench) return cmd_benchmark(g, suite, seed_opt->count() > 0, timing);
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kDivergence;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
