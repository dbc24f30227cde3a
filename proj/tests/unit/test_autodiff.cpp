#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include <riskkit/errors.hpp>
#include <riskkit/losses.hpp>
#include <riskkit/model.hpp>
#include <riskkit/optimizer.hpp>
#include <riskkit/tensor.hpp>

#include "support/gradcheck.hpp"

namespace riskkit {
namespace {

using testing::check_random_mlp;
using testing::kAllLossCases;
using testing::LossCase;
using testing::random_matrix;

SequentialModel single_dense(std::vector<double> w, std::vector<double> b, std::size_t in, std::size_t out) {
  Layer l{LayerSpec::dense(in, out), Tensor::matrix(in, out, std::move(w), true), Tensor::vector(std::move(b), true)};
  return SequentialModel({l});
}

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  EXPECT_THROW(Tensor({0, 2}, {}), ShapeError);
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Tensor, CopiesAliasAndCopyIsDeep) {
  Tensor a = Tensor::vector({1.0, 2.0}, true);
  Tensor alias = a;
  Tensor deep = a.copy();
  a.mutable_values()[0] = 5.0;
  EXPECT_EQ(alias.at(0), 5.0);
  EXPECT_EQ(deep.at(0), 1.0);
  EXPECT_TRUE(alias.shares_storage_with(a));
  EXPECT_FALSE(deep.shares_storage_with(a));
  EXPECT_TRUE(deep.requires_grad());
}

TEST(Forward, IdentityDense) {
  const auto m = single_dense({1, 0, 0, 1}, {0, 0}, 2, 2);
  const Tensor y = m.forward(Tensor::matrix(1, 2, {1, 2}));
  EXPECT_EQ(y.at(0), 1.0);
  EXPECT_EQ(y.at(1), 2.0);
}

TEST(Forward, Relu) {
  const Tensor y = relu(Tensor::vector({-1, 0, 2}));
  EXPECT_EQ(y.at(0), 0.0);
  EXPECT_EQ(y.at(1), 0.0);
  EXPECT_EQ(y.at(2), 2.0);
}

TEST(Forward, HandMatmul) {
  const auto m = single_dense({2}, {0.5}, 1, 1);
  EXPECT_DOUBLE_EQ(m.forward(Tensor::matrix(1, 1, {3})).item(), 6.5);
}

TEST(Forward, ShapeMismatchNamesLayer) {
  const auto m = SequentialModel::mlp(3, {4}, 1, 0);
  try {
    m.forward(Tensor::matrix(1, 2, {1, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos) << e.what();
  }
}

TEST(Forward, NonFiniteActivationIsAnError) {
  const auto m = single_dense({1e308}, {0}, 1, 1);
  EXPECT_THROW(m.forward(Tensor::matrix(1, 1, {1e10})), NumericError);
}

TEST(Forward, DropoutIsIdentityAtInferenceUnlessForced) {
  const auto m = SequentialModel::from_specs({LayerSpec::dense(3, 8), LayerSpec::dropout(8, 0.5)}, 1);
  Rng rng(2);
  const Tensor x = random_matrix(4, 3, rng);
  Rng a(7), b(7);
  const Tensor plain = m.forward(x, Mode::infer, false, a);
  const Tensor det = m.slice(0, 1).forward(x, Mode::infer, false, b);
  for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_EQ(plain.at(i), det.at(i));
  Rng c(7);
  const Tensor forced = m.forward(x, Mode::infer, true, c);
  bool changed = false;
  for (std::size_t i = 0; i < forced.numel(); ++i) changed |= forced.at(i) != plain.at(i);
  EXPECT_TRUE(changed);
}

TEST(Forward, InvertedDropoutScaling) {
  const auto m = SequentialModel::from_specs({LayerSpec::dropout(1, 0.2)}, 0);
  const Tensor x = Tensor::matrix(20000, 1, std::vector<double>(20000, 1.0));
  Rng rng(3);
  const Tensor y = m.forward(x, Mode::train, false, rng);
  double sum = 0.0;
  for (double v : y.values()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.25) < 1e-15);
    sum += v;
  }
  // Mean 1, std of the mean sqrt(0.25 / 20000) ~ 0.0035.
  EXPECT_NEAR(sum / 20000.0, 1.0, 0.02);
}

TEST(LayerSpec, DropoutRateBelowOne) {
  EXPECT_THROW(LayerSpec::dropout(4, 1.0).validate(), ConfigError);
  EXPECT_NO_THROW(LayerSpec::dropout(4, 0.0).validate());
}

TEST(Backward, Square) {
  Tensor x = Tensor::scalar(3.0, true);
  sum(square(x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, Linearity) {
  Tensor w = Tensor::matrix(2, 2, {1, 1, 1, 1}, true);
  sum(matmul(Tensor::matrix(1, 2, {1, 1}), w)).backward();
  for (double g : w.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, RequiresScalarOnTape) {
  Tensor x = Tensor::vector({1, 2}, true);
  EXPECT_THROW((x * 2.0).backward(), ShapeError);
  EXPECT_THROW(Tensor::scalar(1.0).backward(), Error);
}

TEST(Backward, NoGradGuardStopsTaping) {
  Tensor x = Tensor::scalar(2.0, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = square(x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

TEST(Backward, AccumulationEqualsSummedLoss) {
  const auto model = SequentialModel::mlp(3, {5}, 2, 11);
  Rng rng(5);
  const Tensor x = random_matrix(6, 3, rng);
  const Tensor y = random_matrix(6, 2, rng);
  auto l1 = [&] { return mse(model.forward(x), y); };
  auto l2 = [&] { return sum(square(model.forward(x))) * 0.3; };
  l1().backward();
  l2().backward();
  std::vector<std::vector<double>> separate;
  for (auto p : model.parameters()) {
    separate.emplace_back(p.grad().begin(), p.grad().end());
    p.zero_grad();
  }
  (l1() + l2()).backward();
  const auto params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t i = 0; i < separate[k].size(); ++i) {
      EXPECT_NEAR(params[k].grad()[i], separate[k][i], 1e-12);
    }
  }
}

TEST(Backward, FiniteDifferenceThreeLayerMlp) {
  const auto model = SequentialModel::mlp(4, {7, 5}, 3, 21);
  Rng rng(8);
  const Tensor x = random_matrix(5, 4, rng);
  const Tensor y = random_matrix(5, 3, rng);
  const auto result = testing::check_gradients([&] { return mse(model.forward(x), y); }, model.parameters());
  EXPECT_LT(result.max_relative_error, 1e-4) << result.worst;
}

class GradientPerLoss : public ::testing::TestWithParam<LossCase> {};

TEST_P(GradientPerLoss, MatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 8; ++s) {
    const auto result = check_random_mlp(derive_seed(1234, s), GetParam());
    EXPECT_LT(result.max_relative_error, 1e-4) << "seed " << s << " " << result.worst;
  }
}

INSTANTIATE_TEST_SUITE_P(AllLosses, GradientPerLoss, ::testing::ValuesIn(kAllLossCases),
                         [](const auto& info) { return std::string(testing::loss_case_name(info.param)); });

TEST(Backward, GatherRowsAndLogSoftmax) {
  Tensor a = Tensor::matrix(3, 2, {0.1, -0.4, 0.7, 0.2, -1.0, 0.5}, true);
  const std::vector<std::size_t> rows{2, 0, 2};
  auto f = [&] { return sum(log_softmax_rows(gather_rows(a, rows)) * Tensor::matrix(3, 2, {1, 0, 0, 1, 1, 1})); };
  const auto r = testing::check_gradients(f, {a});
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(Backward, ElementwiseOps) {
  Tensor a = Tensor::vector({0.3, 1.2, 2.0}, true);
  Tensor b = Tensor::vector({1.5, -0.7, 0.4}, true);
  auto f = [&] { return sum(exp(a) * b + log(softplus(b)) / (a + 1.0)) - sum(row_mean(a.reshape({1, 3}))) * 2.0; };
  const auto r = testing::check_gradients(f, {a, b});
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(Softmax, RowsAreDistributions) {
  Rng rng(4);
  const Tensor p = softmax_rows(random_matrix(50, 7, rng, 3.0));
  for (std::size_t i = 0; i < 50; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      const double v = p.at(i, j);
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Optimizer, SgdStep) {
  Tensor p = Tensor::vector({1.0}, true);
  Optimizer opt({OptimizerKind::sgd, 0.1}, {p});
  sum(p * 2.0).backward();
  opt.step();
  EXPECT_DOUBLE_EQ(p.at(0), 0.8);
  EXPECT_EQ(p.grad()[0], 0.0);
}

TEST(Optimizer, ZeroGradIsFixedPoint) {
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    Tensor p = Tensor::vector({1.0}, true);
    Optimizer opt({kind, 0.1}, {p});
    sum(p * 0.0).backward();
    opt.step();
    EXPECT_EQ(p.at(0), 1.0);
  }
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  Tensor p = Tensor::vector({0.0}, true);
  Optimizer opt({OptimizerKind::adam, 0.001}, {p});
  sum(p).backward();
  opt.step();
  // m_hat = 1, v_hat = 1: delta = lr / (1 + eps).
  EXPECT_NEAR(p.at(0), -0.001 / (1.0 + 1e-8), 1e-18);
}

TEST(Optimizer, MissingGradientIsAnError) {
  Tensor p = Tensor::vector({1.0}, true);
  Optimizer opt({OptimizerKind::sgd, 0.1}, {p});
  EXPECT_THROW(opt.step(), Error);
}

TEST(Optimizer, ConfigValidation) {
  EXPECT_THROW((OptimizerConfig{OptimizerKind::sgd, 0.0}.validate()), ConfigError);
  EXPECT_THROW((OptimizerConfig{OptimizerKind::adam, 0.1, 1.0}.validate()), ConfigError);
  EXPECT_THROW(parse_optimizer_kind("rmsprop"), ConfigError);
}

TEST(Optimizer, TrainingIsBitDeterministic) {
  auto run = [] {
    const auto model = SequentialModel::mlp(3, {6}, 1, 99);
    Optimizer opt({}, model.parameters());
    Rng rng(1);
    const Tensor x = random_matrix(16, 3, rng);
    const Tensor y = random_matrix(16, 1, rng);
    for (int k = 0; k < 25; ++k) {
      mse(model.forward(x), y).backward();
      opt.step();
    }
    std::vector<double> out;
    for (const auto& p : model.parameters()) out.insert(out.end(), p.values().begin(), p.values().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Losses, GaussianNllAtZeroResidual) {
  const Tensor y = Tensor::matrix(2, 1, {0.3, -1.0});
  EXPECT_NEAR(gaussian_nll(y, Tensor::matrix(2, 1, {1, 1}), y).item(), 0.5 * std::log(2.0 * std::numbers::pi),
              1e-12);
  EXPECT_NEAR(gaussian_nll(y, Tensor::matrix(2, 1, {1, 1}), y).item(), 0.918939, 1e-6);
}

TEST(Losses, GaussianNllFormula) {
  const Tensor mu = Tensor::matrix(2, 1, {0.0, 1.0});
  const Tensor sigma = Tensor::matrix(2, 1, {2.0, 0.5});
  const Tensor y = Tensor::matrix(2, 1, {1.0, 0.0});
  double expected = 0.0;
  for (auto [m, s, t] : {std::tuple{0.0, 2.0, 1.0}, std::tuple{1.0, 0.5, 0.0}}) {
    expected += 0.5 * std::log(2.0 * std::numbers::pi * s * s) + (t - m) * (t - m) / (2.0 * s * s);
  }
  EXPECT_NEAR(gaussian_nll(mu, sigma, y).item(), expected / 2.0, 1e-12);
}

TEST(Losses, CrossEntropyUniform) {
  const Tensor p = Tensor::matrix(1, 4, {0.25, 0.25, 0.25, 0.25});
  const Tensor y = Tensor::matrix(1, 4, {0, 0, 1, 0});
  EXPECT_NEAR(cross_entropy(p, y).item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(softmax_cross_entropy(Tensor::matrix(1, 4, {3, 3, 3, 3}), y).item(), std::log(4.0), 1e-12);
}

TEST(Losses, Mse) {
  EXPECT_DOUBLE_EQ(mse(Tensor::vector({1, 2}), Tensor::vector({1, 4})).item(), 2.0);
}

TEST(Losses, Errors) {
  const Tensor y = Tensor::matrix(1, 2, {1, 0});
  EXPECT_THROW(gaussian_nll(y, Tensor::matrix(1, 2, {1, 0}), y), NumericError);
  EXPECT_THROW(gaussian_nll(y, Tensor::matrix(1, 2, {1, -1}), y), NumericError);
  EXPECT_THROW(cross_entropy(Tensor::matrix(1, 2, {1.5, -0.5}), y), NumericError);
  EXPECT_THROW(cross_entropy(Tensor::matrix(1, 2, {0.6, 0.6}), y), NumericError);
  EXPECT_THROW(mse(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), ShapeError);
}

}  // namespace
}  // namespace riskkit
