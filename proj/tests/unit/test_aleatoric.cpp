#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include <riskkit/aleatoric.hpp>
#include <riskkit/bias.hpp>
#include <riskkit/data.hpp>
#include <riskkit/errors.hpp>
#include <riskkit/losses.hpp>
#include <riskkit/wrapper.hpp>

#include "support/gradcheck.hpp"

namespace riskkit {
namespace {

using testing::random_matrix;
using testing::random_one_hot;

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = average_rank_percentiles(a);
  const auto rb = average_rank_percentiles(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

Examples classification(std::vector<double> xs, std::size_t dim, std::vector<std::size_t> labels, std::size_t classes) {
  Examples e;
  const std::size_t n = labels.size();
  e.x = Tensor::matrix(n, dim, std::move(xs));
  e.y = one_hot(labels, classes);
  e.labels = std::move(labels);
  return e;
}

TEST(MveClassification, ZeroNoiseLimit) {
  Rng rng(1);
  const Tensor mu = random_matrix(6, 4, rng);
  const Tensor y = random_one_hot(6, 4, rng);
  const Tensor floor = Tensor::full({6, 4}, kSigmaFloor);
  Rng noise(2);
  const double stochastic = mve_classification_loss(mu, floor, y, 20, noise).item();
  EXPECT_NEAR(stochastic, softmax_cross_entropy(mu, y).item(), 1e-5);
}

TEST(MveClassification, LargeTConverges) {
  Rng rng(3);
  const std::size_t n = 5, k = 3, T = 10000;
  const Tensor mu = random_matrix(n, k, rng);
  const Tensor sigma = positive_sigma(random_matrix(n, k, rng));
  const Tensor y = random_one_hot(n, k, rng);
  const double deterministic = softmax_cross_entropy(mu, y).item();
  // Delta method: the averaged logit has std sigma / sqrt(T) per entry and the
  // per-row loss has gradient softmax(mu) - y.
  const Tensor p = softmax_rows(mu);
  double var = 0.0;
  for (std::size_t i = 0; i < n * k; ++i) {
    const double g = p.at(i) - y.at(i);
    var += g * g * sigma.at(i) * sigma.at(i) / static_cast<double>(T);
  }
  const double se = std::sqrt(var) / static_cast<double>(n);
  Rng noise(4);
  const double loss = mve_classification_loss(mu, sigma, y, T, noise).item();
  EXPECT_LE(std::abs(loss - deterministic), 3.0 * se) << "se " << se;
}

TEST(MveClassification, SymmetricTwoClass) {
  const Tensor mu = Tensor::matrix(1, 2, {0.0, 0.0});
  const Tensor sigma = Tensor::matrix(1, 2, {1.7, 1.7});
  // E[p_0] = 1/2 by symmetry, so E[-log p_0] and E[-log p_1] agree.
  std::vector<double> d;
  const std::size_t runs = 4000;
  for (std::size_t r = 0; r < runs; ++r) {
    Rng a(r), b(r + runs);
    d.push_back(mve_classification_loss(mu, sigma, Tensor::matrix(1, 2, {1, 0}), 3, a).item() -
                mve_classification_loss(mu, sigma, Tensor::matrix(1, 2, {0, 1}), 3, b).item());
  }
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / runs;
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double se = std::sqrt(ss / (runs - 1) / runs);
  EXPECT_LE(std::abs(mean), 3.0 * se);
}

TEST(MveClassification, GradientsReachBothHeads) {
  const auto base = SequentialModel::mlp(3, {6}, 4, 1, true);
  const auto [extractor, head] = split_feature_extractor(base);
  const MveHead mve = MveHead::attach(head, extractor.feature_dim, 2);
  Rng rng(5);
  const Tensor x = random_matrix(16, 3, rng);
  const Tensor y = random_one_hot(16, 4, rng);
  Rng unused(0);
  mve_classification_step(mve, extractor.forward(x, Mode::train, false, unused), y, 20, 7).backward();
  auto nonzero = [](const SequentialModel& m) {
    for (const auto& p : m.parameters()) {
      for (double g : p.grad()) {
        if (g != 0.0) return true;
      }
    }
    return false;
  };
  EXPECT_TRUE(nonzero(mve.mu_head));
  EXPECT_TRUE(nonzero(mve.sigma_head));
  EXPECT_TRUE(nonzero(extractor.backbone));
}

TEST(MveClassification, Errors) {
  Rng rng(0);
  const Tensor mu = Tensor::matrix(1, 2, {0, 0});
  EXPECT_THROW(mve_classification_loss(mu, Tensor::matrix(1, 2, {1, 1}), Tensor::matrix(1, 2, {1, 0}), 0, rng),
               ConfigError);
  EXPECT_THROW(mve_classification_loss(mu, Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(1, 2, {1, 0}), 1, rng),
               NumericError);
}

TEST(Sigma, AlwaysPositive) {
  const Tensor s = positive_sigma(Tensor::vector({-1e6, -50.0, 0.0, 3.0, 1e6}));
  for (double v : s.values()) EXPECT_GE(v, kSigmaFloor);
  EXPECT_NEAR(s.at(2), std::log(2.0) + kSigmaFloor, 1e-15);
}

TEST(MveRegression, ConstantTargetShrinksSigma) {
  Rng rng(6);
  Examples data;
  data.x = random_matrix(128, 2, rng);
  data.y = Tensor::full({128, 1}, 0.7);
  auto g = wrap(SequentialModel::mlp(2, {16}, 1, 3), {MetricConfig::make_mve()});
  TrainConfig c;
  c.epochs = 60;
  c.optimizer.learning_rate = 3e-3;
  const auto report = g.train(data, c);
  const auto& nll = report.metric_loss.at("mve");
  EXPECT_LT(nll.back(), nll.front());
  EXPECT_LT(nll.back(), 0.0);
  const auto out = g.predict_with_risk(data.x);
  double mean_sigma = 0.0;
  for (double s : out.risks.at("mve").values()) mean_sigma += s / 128.0;
  EXPECT_LT(mean_sigma, 0.2);
}

TEST(MveRegression, HeteroscedasticSigmaTracksNoise) {
  Rng rng(7);
  const std::size_t n = 1000;
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = rng.uniform(-3.0, 3.0);
    ys[i] = rng.normal() * xs[i];
  }
  Examples data{Tensor::matrix(n, 1, xs), Tensor::matrix(n, 1, ys), {}};
  auto g = wrap(SequentialModel::mlp(1, {32}, 1, 5), {MetricConfig::make_mve()});
  TrainConfig c;
  c.epochs = 100;
  g.train(data, c);
  std::vector<double> grid, abs_x;
  for (int i = 0; i <= 120; ++i) grid.push_back(-3.0 + 0.05 * i);
  for (double x : grid) abs_x.push_back(std::abs(x));
  const auto sigma = aleatoric_score(g, Tensor::matrix(grid.size(), 1, grid)).summary;
  EXPECT_GT(spearman({sigma.values().begin(), sigma.values().end()}, abs_x), 0.9);
}

TEST(AleatoricScore, AmbiguousBoundaryScoresHigher) {
  // Two classes separated along the first axis; inside |x0| < 0.5 labels are coin flips.
  Rng rng(8);
  const std::size_t n = 1200;
  std::vector<double> xs;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const double x0 = rng.uniform(-3.0, 3.0);
    xs.push_back(x0);
    xs.push_back(rng.normal());
    labels.push_back(std::abs(x0) < 0.5 ? rng.below(2) : (x0 > 0 ? 1 : 0));
  }
  const Examples data = classification(xs, 2, labels, 2);
  auto g = wrap(SequentialModel::mlp(2, {32}, 2, 6, true), {MetricConfig::make_mve()});
  TrainConfig c;
  c.epochs = 40;
  g.train(data, c);
  const auto score = aleatoric_score(g, data.x).summary;
  double boundary = 0.0, prototype = 0.0;
  std::size_t nb = 0, np = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x0 = std::abs(xs[2 * i]);
    if (x0 < 0.5) {
      boundary += score.at(i);
      ++nb;
    } else if (x0 > 2.0) {
      prototype += score.at(i);
      ++np;
    }
  }
  EXPECT_GT(boundary / nb, prototype / np);
}

TEST(AleatoricScore, CorruptedMnistLabelsScoreHigher) {
  const Dataset base = take_per_class(load_idx_images(RISKKIT_DATA_DIR "/mnist5k-images.idx3-ubyte",
                                                      RISKKIT_DATA_DIR "/mnist5k-labels.idx1-ubyte"),
                                      200);
  const auto [ds, mask] = corrupt_labels(base, CorruptionSpec{7, 8, 0.2, 1});
  const Examples data = ds.train();
  auto g = wrap(SequentialModel::mlp(784, {128}, 10, 2, true), {MetricConfig::make_mve()});
  TrainConfig c;
  c.epochs = 10;
  g.train(data, c);
  const auto score = aleatoric_score(g, data.x).summary;
  double bad = 0.0, clean = 0.0;
  std::size_t nb = 0, nc = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (mask[ds.train_index[i]]) {
      bad += score.at(i);
      ++nb;
    } else {
      clean += score.at(i);
      ++nc;
    }
  }
  ASSERT_GT(nb, 0u);
  EXPECT_GT(bad / nb, clean / nc);
}

TEST(AleatoricScore, DuplicatesScoreIdentically) {
  auto g = wrap(SequentialModel::mlp(2, {8}, 3, 1, true), {MetricConfig::make_mve()});
  Rng rng(9);
  const Examples data = classification([&] {
    std::vector<double> v(64);
    for (auto& e : v) e = rng.normal();
    return v;
  }(), 2, std::vector<std::size_t>(32, 1), 3);
  TrainConfig c;
  c.epochs = 1;
  g.train(data, c);
  const Tensor x = Tensor::matrix(3, 2, {0.3, -0.2, 0.3, -0.2, 0.3, -0.2});
  const auto s = aleatoric_score(g, x);
  EXPECT_EQ(s.sigma.shape(), (Shape{3, 3}));
  EXPECT_EQ(s.summary.at(0), s.summary.at(1));
  EXPECT_EQ(s.summary.at(1), s.summary.at(2));
  const double row_mean = (s.sigma.at(0, 0) + s.sigma.at(0, 1) + s.sigma.at(0, 2)) / 3.0;
  EXPECT_NEAR(s.summary.at(0), row_mean, 1e-15);
}

TEST(AleatoricScore, Contract) {
  auto g = wrap(SequentialModel::mlp(2, {8}, 1, 1), {MetricConfig::make_dropout()});
  EXPECT_THROW(aleatoric_score(g, Tensor::matrix(1, 2, {0, 0})), ConfigError);
  auto h = wrap(SequentialModel::mlp(2, {8}, 1, 1), {MetricConfig::make_mve()});
  EXPECT_THROW(aleatoric_score(h, Tensor::matrix(1, 2, {0, 0})), UntrainedModelError);
}

}  // namespace
}  // namespace riskkit
