#include <limits>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include <riskkit/aleatoric.hpp>
#include <riskkit/data.hpp>
#include <riskkit/epistemic.hpp>
#include <riskkit/errors.hpp>
#include <riskkit/parallel.hpp>
#include <riskkit/wrapper.hpp>

#include "support/gradcheck.hpp"

namespace riskkit {
namespace {

using testing::random_matrix;

std::vector<double> flat(const std::vector<Tensor>& ts) {
  std::vector<double> out;
  for (const auto& p : ts) out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

std::vector<double> flat(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

TrainConfig quick(std::size_t epochs = 3, std::uint64_t seed = 0) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 32;
  c.seed = seed;
  return c;
}

const Dataset& cubic() {
  static const Dataset ds = make_cubic(256, 64, 3);
  return ds;
}

TEST(Wrap, MveAddsSigmaHead) {
  const auto m = SequentialModel::mlp(1, {16}, 1, 0);
  const auto g = wrap(m, {MetricConfig::make_mve()});
  ASSERT_NE(g.mve_head(), nullptr);
  const auto& sigma = g.mve_head()->sigma_head;
  ASSERT_EQ(sigma.layers().front().spec.kind, LayerKind::dense);
  EXPECT_EQ(sigma.layers().front().weight.shape(), (Shape{16, 1}));
}

TEST(Wrap, NeedsMetrics) {
  const auto m = SequentialModel::mlp(1, {16}, 1, 0);
  EXPECT_THROW(wrap(m, {}), ConfigError);
}

TEST(Wrap, DropoutAfterEveryExtractorDense) {
  const auto m = SequentialModel::mlp(2, {8, 8}, 1, 0);
  const auto g = wrap(m, {MetricConfig::make_dropout(0.2)});
  const auto specs = g.extractor().backbone.specs();
  std::size_t dense = 0;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].kind != LayerKind::dense) continue;
    ++dense;
    ASSERT_LT(i + 1, specs.size());
    EXPECT_EQ(specs[i + 1].kind, LayerKind::dropout);
    EXPECT_DOUBLE_EQ(specs[i + 1].dropout_rate, 0.2);
  }
  EXPECT_EQ(dense, 2u);
  EXPECT_FALSE(m.has_stochastic_layers());
}

TEST(Wrap, ConflictsAreReported) {
  const auto m = insert_dropout(SequentialModel::mlp(2, {8}, 1, 0), 0.1);
  EXPECT_THROW(wrap(m, {MetricConfig::make_dropout()}), IncompatibleMetricError);
  const auto plain = SequentialModel::mlp(2, {8}, 1, 0);
  EXPECT_THROW(wrap(plain, {MetricConfig::make_mve(), MetricConfig::make_mve()}), ConfigError);
  EXPECT_THROW(wrap(plain, {MetricConfig::make_ensemble(3, {}, {1, 1, 2})}), ConfigError);
  EXPECT_THROW(parse_metric_spec("ensemble(ensemble)"), IncompatibleMetricError);
  EXPECT_THROW(parse_metric_spec("mve(dropout)"), IncompatibleMetricError);
}

TEST(Wrap, NonDestructive) {
  const auto m = SequentialModel::mlp(3, {8}, 2, 4);
  Rng rng(1);
  const Tensor x = random_matrix(10, 3, rng);
  const auto before = flat(m.forward(x));
  {
    const auto g = wrap(m, {MetricConfig::make_dropout(), MetricConfig::make_mve(), MetricConfig::make_vae()});
    EXPECT_EQ(flat(g.source().forward(x)), before);
  }
  EXPECT_EQ(flat(m.forward(x)), before);
}

TEST(Wrap, SharedBackbone) {
  const auto m = SequentialModel::mlp(1, {8}, 1, 2);
  auto g = wrap(m, {MetricConfig::make_mve(), MetricConfig::make_vae(4)});
  const auto& w = g.extractor().backbone.layers()[0].weight;
  EXPECT_TRUE(w.shares_storage_with(m.layers()[0].weight));
  EXPECT_TRUE(g.vae()->encoder.backbone.layers()[0].weight.shares_storage_with(w));
  // Stepping on the combined loss moves the features both heads read.
  const Examples batch = cubic().train();
  const auto f0 = flat(g.features(batch.x));
  const auto z0 = flat(g.vae()->latent_mean(g.features(batch.x)));
  g.train_step(batch.x, batch.y, 1);
  EXPECT_NE(flat(g.features(batch.x)), f0);
  EXPECT_NE(flat(g.vae()->latent_mean(g.features(batch.x))), z0);
}

TEST(Train, MveReplacesTaskLoss) {
  const auto m = SequentialModel::mlp(1, {8}, 1, 2);
  const auto g = wrap(m, {MetricConfig::make_mve()});
  const Examples data = cubic().train();
  const auto terms = g.loss_terms(data.x, data.y, 5);
  ASSERT_EQ(terms.terms.size(), 1u);
  EXPECT_EQ(terms.terms[0].first, "mve");
  const double expected = mve_regression_loss(*g.mve_head(), g.features(data.x), data.y).item();
  EXPECT_DOUBLE_EQ(terms.terms[0].second.item(), expected);
}

TEST(Train, VaeAddsReconstructionAndKl) {
  const auto m = SequentialModel::mlp(1, {8}, 1, 2);
  const auto g = wrap(m, {MetricConfig::make_vae(2)});
  const Examples data = cubic().train();
  const auto terms = g.loss_terms(data.x, data.y, 5);
  ASSERT_EQ(terms.terms.size(), 2u);
  EXPECT_EQ(terms.terms[0].first, "task");
  EXPECT_EQ(terms.terms[1].first, "vae");
  Rng rng(5);
  const auto t = g.vae()->terms(data.x, g.features(data.x), rng);
  EXPECT_DOUBLE_EQ(terms.terms[1].second.item(), t.reconstruction.item() + t.kl.item());
  EXPECT_GT(t.kl.item(), 0.0);
}

TEST(Train, ZeroEpochsIsNoOp) {
  const auto m = SequentialModel::mlp(1, {8}, 1, 2);
  auto g = wrap(m, {MetricConfig::make_mve()});
  const auto before = flat(g.shared_parameters());
  const auto report = g.train(cubic().train(), quick(0));
  EXPECT_EQ(flat(g.shared_parameters()), before);
  EXPECT_TRUE(report.task_loss.empty());
  EXPECT_TRUE(report.metric_loss.empty());
  EXPECT_FALSE(g.trained());
}

TEST(Train, ReportsCurves) {
  auto g = wrap(SequentialModel::mlp(1, {8}, 1, 2), {MetricConfig::make_mve(), MetricConfig::make_vae(2)});
  const auto report = g.train(cubic().train(), quick(4));
  EXPECT_EQ(report.task_loss.size(), 4u);
  EXPECT_EQ(report.metric_loss.at("mve").size(), 4u);
  EXPECT_EQ(report.metric_loss.at("vae").size(), 4u);
  EXPECT_EQ(report.steps, 4u * 8u);
}

TEST(Train, DivergenceReportsEpochAndBatch) {
  auto g = wrap(SequentialModel::mlp(1, {4}, 1, 2), {MetricConfig::make_dropout()});
  Examples data = cubic().train();
  data.y = Tensor(data.y.shape(), std::vector<double>(data.y.numel(), 1e200));
  try {
    g.train(data, quick(1));
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.epoch(), 0u);
    EXPECT_EQ(e.batch(), 0u);
  }
}

TEST(Train, DimensionMismatchIsDataError) {
  auto g = wrap(SequentialModel::mlp(2, {4}, 1, 2), {MetricConfig::make_mve()});
  EXPECT_THROW(g.train(cubic().train(), quick(1)), DataError);
}

TEST(Train, Deterministic) {
  auto run = [] {
    auto g = wrap(SequentialModel::mlp(1, {8}, 1, 2), {MetricConfig::make_dropout(), MetricConfig::make_mve()},
                  {std::nullopt, 7});
    g.train(cubic().train(), quick(3, 11));
    return flat(g.shared_parameters());
  };
  EXPECT_EQ(run(), run());
}

TEST(Predict, UntrainedIsAnError) {
  const auto g = wrap(SequentialModel::mlp(1, {8}, 1, 2), {MetricConfig::make_mve()});
  EXPECT_THROW(g.predict_with_risk(cubic().test().x), UntrainedModelError);
}

TEST(Predict, MveShapes) {
  auto g = wrap(SequentialModel::mlp(1, {8}, 1, 2), {MetricConfig::make_mve()});
  g.train(cubic().train(), quick(1));
  Rng rng(3);
  const auto out = g.predict_with_risk(random_matrix(8, 1, rng));
  EXPECT_EQ(out.prediction.shape(), (Shape{8, 1}));
  ASSERT_EQ(out.risks.size(), 1u);
  EXPECT_EQ(out.risks.at("mve").shape(), (Shape{8, 1}));
  for (double s : out.risks.at("mve").values()) EXPECT_GT(s, 0.0);
  EXPECT_EQ(out.metadata.at("sigma_convention"), "std");
}

TEST(Predict, DropoutSingleSampleHasZeroVariance) {
  auto g = wrap(SequentialModel::mlp(1, {8}, 1, 2), {MetricConfig::make_dropout()});
  g.train(cubic().train(), quick(1));
  const auto out = g.predict_with_risk(cubic().test().x, SamplingOptions{1, 4});
  for (double v : out.risks.at("dropout").values()) EXPECT_EQ(v, 0.0);
}

TEST(Predict, EnsembleNonNegativeOnGrid) {
  auto g = wrap(SequentialModel::mlp(1, {8}, 1, 2), {MetricConfig::make_ensemble(5)});
  g.train(cubic().train(), quick(2));
  const auto out = g.predict_with_risk(cubic().test().x);
  EXPECT_EQ(out.risks.at("ensemble").rows(), cubic().test().x.rows());
  for (double v : out.risks.at("ensemble").values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_TRUE(std::isfinite(v));
  }
  EXPECT_EQ(out.metadata.at("N"), "5");
}

TEST(Predict, OneRiskPerMetric) {
  auto g = wrap(SequentialModel::mlp(1, {8}, 1, 2),
                {MetricConfig::make_dropout(), MetricConfig::make_mve(), MetricConfig::make_vae(2),
                 MetricConfig::make_histogram(), MetricConfig::make_kde()});
  g.train(cubic().train(), quick(1));
  const Tensor x = cubic().test().x;
  const auto out = g.predict_with_risk(x);
  std::set<std::string> keys;
  for (const auto& [k, v] : out.risks) {
    keys.insert(k);
    EXPECT_EQ(v.rows(), x.rows()) << k;
    for (double s : v.values()) {
      EXPECT_TRUE(std::isfinite(s)) << k;
      EXPECT_GE(s, 0.0) << k;
    }
  }
  const auto ids = g.metric_ids();
  EXPECT_EQ(keys, std::set<std::string>(ids.begin(), ids.end()));
}

TEST(Predict, ConcurrentCallsAgree) {
  auto g = wrap(SequentialModel::mlp(1, {8}, 1, 2), {MetricConfig::make_dropout()});
  g.train(cubic().train(), quick(1));
  const Tensor x = cubic().test().x;
  std::vector<std::vector<double>> results(4);
  parallel_for(4, [&](std::size_t i) { results[i] = flat(g.predict_with_risk(x, {10, 3}).risks.at("dropout")); });
  for (const auto& r : results) EXPECT_EQ(r, results[0]);
}

TEST(MetricSpec, Parsing) {
  const auto e = parse_metric_spec("ensemble:3(mve)");
  EXPECT_EQ(e.kind, MetricKind::ensemble);
  EXPECT_EQ(e.ensemble.members, 3u);
  ASSERT_EQ(e.ensemble.inner.size(), 1u);
  EXPECT_EQ(e.ensemble.inner[0].kind, MetricKind::mve);
  EXPECT_EQ(e.id(), "ensemble(mve)");
  EXPECT_DOUBLE_EQ(parse_metric_spec("dropout:0.2").dropout.rate, 0.2);
  const auto list = parse_metric_list("ensemble:5(mve)+dropout");
  ASSERT_EQ(list.size(), 2u);
  EXPECT_EQ(list[1].kind, MetricKind::dropout);
  EXPECT_THROW(parse_metric_list("mve+"), ConfigError);
  EXPECT_THROW(parse_metric_list("ensemble(mve"), ConfigError);
  EXPECT_THROW(parse_metric_spec("bayes"), ConfigError);
  EXPECT_THROW(parse_metric_spec("dropout:1.5"), ConfigError);
}

TEST(MetricSpec, JsonRoundTrip) {
  const auto m = parse_metric_spec("ensemble:3(mve)");
  const auto back = MetricConfig::from_json(m.to_json());
  EXPECT_EQ(back.to_json(), m.to_json());
}

TEST(TrainConfigJson, RoundTripAndValidation) {
  TrainConfig c = quick(7, 9);
  c.optimizer.kind = OptimizerKind::sgd;
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace riskkit
