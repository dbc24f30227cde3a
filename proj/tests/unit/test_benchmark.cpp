#include <filesystem>
#include <set>
#include <string>

#include <gtest/gtest.h>

#include <riskkit/benchmark.hpp>
#include <riskkit/errors.hpp>
#include <riskkit/serialization.hpp>

namespace riskkit {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("riskkit_bench_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

BenchmarkConfig tiny_uci() {
  BenchmarkConfig c = BenchmarkConfig::load(RISKKIT_CONFIG_DIR "/uci.json");
  c.trials = 2;
  c.wrappers = {"mve", "dropout+mve"};
  c.train.epochs = 2;
  return c;
}

TEST(BenchmarkConfig, PresetsLoadAndValidate) {
  for (const char* name : {"cubic", "uci", "mislabel", "ood", "adversarial"}) {
    const auto c = BenchmarkConfig::load(fs::path(RISKKIT_CONFIG_DIR) / (std::string(name) + ".json"));
    EXPECT_EQ(to_string(c.suite), name);
    EXPECT_NO_THROW(c.validate()) << name;
  }
  const auto uci = BenchmarkConfig::load(RISKKIT_CONFIG_DIR "/uci.json");
  EXPECT_EQ(uci.trials, 5u);
  EXPECT_EQ(uci.hidden, (std::vector<std::size_t>{50}));
  ASSERT_EQ(uci.datasets.size(), 1u);
  EXPECT_TRUE(fs::exists(uci.resolve(uci.datasets[0].path)));
}

TEST(BenchmarkConfig, MissingDatasetIsDataError) {
  const auto yacht = BenchmarkConfig::load(RISKKIT_CONFIG_DIR "/uci_yacht.json");
  EXPECT_THROW(yacht.validate(), DataError);
}

TEST(BenchmarkConfig, Errors) {
  EXPECT_THROW(BenchmarkConfig::from_json(nlohmann::json::array()), ConfigError);
  EXPECT_THROW(BenchmarkConfig::from_json({{"trials", 1}}), ConfigError);
  EXPECT_THROW(BenchmarkConfig::from_json({{"suite", "weather"}}), ConfigError);
  EXPECT_THROW(BenchmarkConfig::from_json({{"suite", "cubic"}, {"trials", "many"}}), ConfigError);
  EXPECT_THROW(BenchmarkConfig::from_json({{"suite", "cubic"}, {"data", {{"form", "quartic"}}}}), ConfigError);
  EXPECT_THROW(BenchmarkConfig::load("/nonexistent/riskkit.json"), ConfigError);

  const fs::path dir = scratch_dir("errors");
  write_text_file(dir / "broken.json", "{\"suite\": ");
  EXPECT_THROW(BenchmarkConfig::load(dir / "broken.json"), ConfigError);

  auto c = BenchmarkConfig::defaults(Suite::cubic);
  c.trials = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = BenchmarkConfig::defaults(Suite::cubic);
  c.wrappers = {"mve+mve"};
  EXPECT_THROW(c.validate(), ConfigError);
  c = BenchmarkConfig::defaults(Suite::adversarial);
  c.epsilons = {-0.1};
  EXPECT_THROW(c.validate(), ConfigError);
  c = BenchmarkConfig::defaults(Suite::mislabel);
  c.images = "x";
  c.labels = "y";
  c.probabilities = {1.5};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(BenchmarkConfig, JsonRoundTrip) {
  const auto c = BenchmarkConfig::load(RISKKIT_CONFIG_DIR "/adversarial.json");
  const auto back = BenchmarkConfig::from_json(c.to_json(), c.base_dir);
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(BenchmarkConfig, TrialSeedsDistinct) {
  const auto c = BenchmarkConfig::defaults(Suite::uci);
  std::set<std::uint64_t> seeds;
  for (std::size_t t = 0; t < 100; ++t) seeds.insert(c.trial_seed(t));
  EXPECT_EQ(seeds.size(), 100u);
}

TEST(RunBenchmark, TinyUciIsByteDeterministic) {
  const auto config = tiny_uci();
  const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
  const auto first = run_benchmark(config);
  write_benchmark(a, first);
  write_benchmark(b, run_benchmark(config));
  for (const char* f : {"results.json", "results.csv"}) {
    ASSERT_TRUE(fs::exists(a / f));
    EXPECT_EQ(read_text_file(a / f), read_text_file(b / f)) << f;
  }
  ASSERT_EQ(first.results.size(), 2u);
  for (const auto& r : first.results) {
    EXPECT_EQ(r.dataset, "boston");
    EXPECT_EQ(r.trial_seeds.size(), 2u);
    ASSERT_TRUE(r.metrics.count("rmse"));
    EXPECT_EQ(r.metrics.at("rmse").count, 2u);
    EXPECT_TRUE(r.metrics.at("rmse").stddev.has_value());
    EXPECT_FALSE(r.wall_clock_seconds.has_value());
  }
}

TEST(RunBenchmark, ResultsCsvLayout) {
  BenchmarkResult r;
  r.suite = "uci";
  r.dataset = "boston";
  r.wrapper = "ensemble:5(mve)";
  r.metrics["rmse"] = Summary{3.25, std::nullopt, 1};
  const std::string csv = results_csv({r});
  EXPECT_EQ(csv, "suite,dataset,wrapper,metric,mean,std,trials\nuci,boston,ensemble:5(mve),rmse,3.25,,1\n");
}

TEST(RunBenchmark, TinyOodProducesAuc) {
  auto c = BenchmarkConfig::defaults(Suite::ood);
  c.trials = 1;
  c.wrappers = {"ensemble:2"};
  c.train.epochs = 2;
  c.n_train = 64;
  c.n_test = 32;
  c.n_ood = 32;
  const auto out = run_benchmark(c);
  ASSERT_EQ(out.results.size(), 1u);
  const double auc = out.results[0].metrics.at("auc").mean;
  EXPECT_GE(auc, 0.0);
  EXPECT_LE(auc, 1.0);
}

TEST(RunBenchmark, MissingDataFailsBeforeTraining) {
  auto c = BenchmarkConfig::load(RISKKIT_CONFIG_DIR "/uci_yacht.json");
  EXPECT_THROW(run_benchmark(c), DataError);
}

TEST(GaussianPredictive, PrefersMixtureThenMve) {
  RiskOutput o;
  o.prediction = Tensor::matrix(1, 1, {5.0});
  EXPECT_FALSE(gaussian_predictive(o).has_value());
  o.risks["mve"] = Tensor::matrix(1, 1, {0.5});
  auto p = gaussian_predictive(o);
  ASSERT_TRUE(p.has_value());
  EXPECT_EQ(p->second.at(0), 0.5);
  o.components = GaussianComponents{{Tensor::matrix(1, 1, {0.0}), Tensor::matrix(1, 1, {2.0})},
                                    {Tensor::matrix(1, 1, {1.0}), Tensor::matrix(1, 1, {1.0})}};
  p = gaussian_predictive(o);
  EXPECT_DOUBLE_EQ(p->first.at(0), 1.0);
  EXPECT_NEAR(p->second.at(0), std::sqrt(2.0), 1e-15);
}

}  // namespace
}  // namespace riskkit
