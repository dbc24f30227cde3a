#include <vector>

#include <gtest/gtest.h>

#include <riskkit/errors.hpp>
#include <riskkit/losses.hpp>
#include <riskkit/model.hpp>
#include <riskkit/optimizer.hpp>

#include "support/gradcheck.hpp"

namespace riskkit {
namespace {

using testing::random_matrix;

std::vector<double> flat_parameters(const SequentialModel& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

std::vector<std::size_t> dense_dims(const SequentialModel& m) {
  std::vector<std::size_t> dims;
  for (const auto& s : m.specs()) {
    if (s.kind != LayerKind::dense) continue;
    if (dims.empty()) dims.push_back(s.in_dim);
    dims.push_back(s.out_dim);
  }
  return dims;
}

TEST(Mlp, LayersAndDims) {
  const auto m = SequentialModel::mlp(13, {64, 32}, 1, 0);
  EXPECT_EQ(m.size(), 5u);
  EXPECT_EQ(m.input_dim(), 13u);
  EXPECT_EQ(m.output_dim(), 1u);
  EXPECT_EQ(m.layers()[0].weight.shape(), (Shape{13, 64}));
  EXPECT_EQ(m.layers()[0].bias.shape(), (Shape{64}));
}

TEST(Mlp, IncompatibleLayersRejected) {
  EXPECT_ANY_THROW(SequentialModel::from_specs({LayerSpec::dense(3, 4), LayerSpec::dense(5, 1)}, 0));
}

TEST(Split, DefaultIsBeforeLastLayer) {
  const auto m = SequentialModel::from_specs(
      {LayerSpec::dense(4, 8), LayerSpec::relu(8), LayerSpec::dense(8, 2)}, 1);
  const auto [extractor, head] = split_feature_extractor(m);
  EXPECT_EQ(extractor.backbone.size(), 2u);
  EXPECT_EQ(head.size(), 1u);
  EXPECT_EQ(extractor.feature_dim, 8u);
}

TEST(Split, ExplicitIndex) {
  const auto m = SequentialModel::from_specs(
      {LayerSpec::dense(4, 8), LayerSpec::relu(8), LayerSpec::dense(8, 2)}, 1);
  const auto [extractor, head] = split_feature_extractor(m, 1);
  EXPECT_EQ(extractor.backbone.size(), 1u);
  EXPECT_EQ(head.size(), 2u);
  EXPECT_THROW(split_feature_extractor(m, 0), ConfigError);
  EXPECT_THROW(split_feature_extractor(m, 3), ConfigError);
}

TEST(Split, SoftmaxOutputStaysWithHead) {
  const auto m = SequentialModel::mlp(4, {8}, 3, 2, true);
  const auto [extractor, head] = split_feature_extractor(m);
  EXPECT_EQ(extractor.backbone.size(), 2u);
  EXPECT_EQ(head.specs().back().kind, LayerKind::softmax_output);
}

TEST(Split, SingleLayerNeedsExplicitSplit) {
  const auto m = SequentialModel::from_specs({LayerSpec::dense(3, 1)}, 0);
  EXPECT_THROW(split_feature_extractor(m), ConfigError);
}

TEST(Split, ComposesToFullForward) {
  const auto m = SequentialModel::mlp(5, {9, 7}, 3, 4);
  const auto [extractor, head] = split_feature_extractor(m);
  Rng rng(10);
  const Tensor x = random_matrix(100, 5, rng);
  const Tensor full = m.forward(x);
  Rng unused(0);
  const Tensor parts = head.forward(extractor.forward(x, Mode::infer, false, unused));
  for (std::size_t i = 0; i < full.numel(); ++i) EXPECT_NEAR(parts.at(i), full.at(i), 1e-12);
}

TEST(Split, ParametersAreAliased) {
  const auto m = SequentialModel::mlp(3, {4}, 1, 3);
  const auto [extractor, head] = split_feature_extractor(m);
  Tensor w = extractor.backbone.layers()[0].weight;
  w.mutable_values()[0] = 42.0;
  EXPECT_EQ(m.layers()[0].weight.at(0), 42.0);
  EXPECT_TRUE(head.layers()[0].weight.shares_storage_with(m.layers()[2].weight));
}

TEST(Clone, SameSeedIdentical) {
  const auto m = SequentialModel::mlp(3, {6}, 2, 0);
  EXPECT_EQ(flat_parameters(clone_reinitialized(m, 9)), flat_parameters(clone_reinitialized(m, 9)));
}

TEST(Clone, DifferentSeedsDiffer) {
  const auto m = SequentialModel::mlp(3, {6}, 2, 0);
  EXPECT_NE(flat_parameters(clone_reinitialized(m, 9)), flat_parameters(clone_reinitialized(m, 10)));
  EXPECT_EQ(clone_reinitialized(m, 9).specs(), m.specs());
}

TEST(Clone, TrainsIndependently) {
  const auto m = SequentialModel::mlp(3, {6}, 1, 0);
  const auto before = flat_parameters(m);
  const auto c = clone_reinitialized(m, 5);
  Optimizer opt({}, c.parameters());
  Rng rng(1);
  const Tensor x = random_matrix(8, 3, rng);
  const Tensor y = random_matrix(8, 1, rng);
  for (int k = 0; k < 5; ++k) {
    mse(c.forward(x), y).backward();
    opt.step();
  }
  EXPECT_EQ(flat_parameters(m), before);
}

TEST(DeepCopy, DoesNotAlias) {
  const auto m = SequentialModel::mlp(2, {3}, 1, 0);
  const auto c = m.deep_copy();
  Tensor w = c.layers()[0].weight;
  w.mutable_values()[0] += 1.0;
  EXPECT_NE(m.layers()[0].weight.at(0), c.layers()[0].weight.at(0));
}

TEST(Mirror, ReversesDenseStack) {
  const auto m = SequentialModel::mlp(13, {64, 32}, 1, 0);
  const auto [extractor, head] = split_feature_extractor(m);
  const auto decoder = mirror_decoder(extractor, 8, 1);
  EXPECT_EQ(dense_dims(decoder), (std::vector<std::size_t>{8, 32, 64, 13}));
  EXPECT_EQ(decoder.specs().back().kind, LayerKind::dense);
  for (std::size_t i = 0; i + 1 < decoder.size(); ++i) {
    if (decoder.specs()[i].kind == LayerKind::dense) EXPECT_EQ(decoder.specs()[i + 1].kind, LayerKind::relu);
  }
}

TEST(Mirror, BaseCase) {
  const auto m = SequentialModel::from_specs({LayerSpec::dense(4, 2), LayerSpec::dense(2, 1)}, 0);
  const auto [extractor, head] = split_feature_extractor(m);
  const auto decoder = mirror_decoder(extractor, 2, 1);
  EXPECT_EQ(dense_dims(decoder), (std::vector<std::size_t>{2, 4}));
}

TEST(Mirror, ShapeRoundTrip) {
  const auto m = SequentialModel::mlp(6, {10, 5}, 1, 0);
  const auto [extractor, head] = split_feature_extractor(m);
  const auto decoder = mirror_decoder(extractor, 5, 1);
  Rng rng(2);
  const Tensor x = random_matrix(7, 6, rng);
  Rng unused(0);
  EXPECT_EQ(decoder.forward(extractor.forward(x, Mode::infer, false, unused)).shape(), x.shape());
}

TEST(Mirror, SkipsDropoutAndRejectsSoftmax) {
  const auto m = insert_dropout(SequentialModel::mlp(6, {10}, 1, 0), 0.1);
  const auto [extractor, head] = split_feature_extractor(m);
  const auto decoder = mirror_decoder(extractor, 4, 1);
  EXPECT_FALSE(decoder.has_stochastic_layers());
  FeatureExtractor bad{SequentialModel::from_specs({LayerSpec::dense(3, 3), LayerSpec::softmax_output(3)}, 0), 3};
  EXPECT_THROW(mirror_decoder(bad, 2, 0), IncompatibleMetricError);
}

TEST(InsertDropout, AfterEveryDense) {
  const auto m = SequentialModel::mlp(3, {4, 4}, 1, 0);
  const auto d = insert_dropout(m, 0.2);
  std::size_t dense = 0, dropout = 0;
  const auto specs = d.specs();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].kind == LayerKind::dense) {
      ++dense;
      ASSERT_LT(i + 1, specs.size());
      EXPECT_EQ(specs[i + 1].kind, LayerKind::dropout);
    }
    if (specs[i].kind == LayerKind::dropout) ++dropout;
  }
  EXPECT_EQ(dense, dropout);
  EXPECT_TRUE(d.layers()[0].weight.shares_storage_with(m.layers()[0].weight));
}

}  // namespace
}  // namespace riskkit
