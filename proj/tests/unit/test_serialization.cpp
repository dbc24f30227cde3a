#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include <riskkit/data.hpp>
#include <riskkit/epistemic.hpp>
#include <riskkit/errors.hpp>
#include <riskkit/serialization.hpp>
#include <riskkit/wrapper.hpp>

#include "support/gradcheck.hpp"

namespace riskkit {
namespace {

namespace fs = std::filesystem;
using testing::random_matrix;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("riskkit_ser_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<double> values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

void expect_same_output(const RiskOutput& a, const RiskOutput& b) {
  EXPECT_EQ(values(a.prediction), values(b.prediction));
  ASSERT_EQ(a.risks.size(), b.risks.size());
  for (const auto& [id, r] : a.risks) {
    ASSERT_TRUE(b.risks.count(id)) << id;
    EXPECT_EQ(values(r), values(b.risks.at(id))) << id;
  }
}

Examples cubic_train() { return make_cubic(96, 8, 1).train(); }

TEST(Checkpoint, RoundTripIsBitExact) {
  const fs::path dir = scratch_dir("ckpt");
  Rng rng(1);
  const NamedTensors tensors{{"a", random_matrix(3, 4, rng)}, {"b", Tensor::vector({1e-300, -0.0, 1e300})}};
  write_checkpoint(dir / "x.ckpt", tensors, {{"note", "hello"}});
  const Checkpoint c = read_checkpoint(dir / "x.ckpt");
  EXPECT_EQ(c.header.at("note"), "hello");
  ASSERT_EQ(c.tensors.size(), 2u);
  EXPECT_EQ(c.find("a").shape(), (Shape{3, 4}));
  EXPECT_EQ(values(c.find("a")), values(tensors[0].second));
  EXPECT_EQ(values(c.find("b")), values(tensors[1].second));
  EXPECT_THROW(c.find("missing"), DataError);

  std::ifstream in(dir / "x.ckpt", std::ios::binary);
  std::string magic(8, '\0');
  in.read(magic.data(), 8);
  EXPECT_EQ(magic, "RKCKPT01");
}

TEST(Checkpoint, RejectsGarbage) {
  const fs::path dir = scratch_dir("garbage");
  write_text_file(dir / "bad.ckpt", "definitely not a checkpoint");
  EXPECT_THROW(read_checkpoint(dir / "bad.ckpt"), DataError);
  write_text_file(dir / "short.ckpt", std::string("RKCKPT01") + std::string(8, '\xff'));
  EXPECT_THROW(read_checkpoint(dir / "short.ckpt"), DataError);
  EXPECT_THROW(read_checkpoint(dir / "absent.ckpt"), DataError);
}

TEST(ModelFile, RoundTrip) {
  const fs::path dir = scratch_dir("model");
  const auto m = insert_dropout(SequentialModel::mlp(4, {7, 5}, 3, 2, true), 0.3);
  save_model(dir / "m.ckpt", m);
  const auto back = load_model(dir / "m.ckpt");
  EXPECT_EQ(back.specs(), m.specs());
  Rng rng(3);
  const Tensor x = random_matrix(6, 4, rng);
  EXPECT_EQ(values(back.forward(x)), values(m.forward(x)));
  EXPECT_EQ(architecture_from_json(architecture_to_json(m.specs())), m.specs());
}

TEST(ModelFile, ShapeMismatchIsDataError) {
  const fs::path dir = scratch_dir("mismatch");
  save_model(dir / "m.ckpt", SequentialModel::mlp(4, {7}, 1, 0));
  const auto other = SequentialModel::mlp(4, {8}, 1, 0);
  EXPECT_THROW(load_parameters(other, read_checkpoint(dir / "m.ckpt")), DataError);
  write_checkpoint(dir / "bare.ckpt", {{"w", Tensor::vector({1.0})}});
  EXPECT_THROW(load_model(dir / "bare.ckpt"), DataError);
}

TEST(WrappedModel, RoundTripPerMetric) {
  const auto data = cubic_train();
  const Tensor x = random_matrix(9, 1, *std::make_unique<Rng>(4));
  for (const char* spec : {"mve", "dropout", "vae", "dropout+mve", "ensemble:3(mve)", "mve+histogram", "kde"}) {
    const fs::path dir = scratch_dir(std::string("wrapped_") + std::to_string(std::hash<std::string>{}(spec)));
    auto g = wrap(SequentialModel::mlp(1, {12}, 1, 5), parse_metric_list(spec), {std::nullopt, 6});
    TrainConfig c;
    c.epochs = 2;
    g.train(data, c);
    g.annotations["tag"] = spec;
    save_wrapped(dir, g);
    const auto back = load_wrapped(dir);
    EXPECT_EQ(back.metric_ids(), g.metric_ids()) << spec;
    EXPECT_EQ(back.annotations.at("tag"), spec);
    EXPECT_EQ(back.steps(), g.steps());
    EXPECT_TRUE(back.trained());
    expect_same_output(g.predict_with_risk(x, {std::nullopt, 8}), back.predict_with_risk(x, {std::nullopt, 8}));
  }
}

TEST(WrappedModel, MissingDirectoryIsDataError) {
  EXPECT_THROW(load_wrapped(scratch_dir("empty") / "nothing"), DataError);
}

TEST(Ensemble, SaveLoadKeepsSeedsAndScores) {
  const fs::path dir = scratch_dir("ensemble");
  EnsembleConfig cfg;
  cfg.members = 3;
  auto e = EnsembleModel::create(SequentialModel::mlp(1, {8}, 1, 0), cfg, {std::nullopt, 2});
  TrainConfig c;
  c.epochs = 2;
  e.train(cubic_train(), c);
  save_ensemble(dir, e);
  const auto back = load_ensemble(dir);
  EXPECT_EQ(back.seeds(), e.seeds());
  const Tensor x = random_matrix(5, 1, *std::make_unique<Rng>(9));
  const auto a = ensemble_score(e, x);
  const auto b = ensemble_score(back, x);
  EXPECT_EQ(values(a.mean), values(b.mean));
  EXPECT_EQ(values(a.variance), values(b.variance));
}

}  // namespace
}  // namespace riskkit
