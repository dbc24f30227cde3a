#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "riskkit/adversarial.hpp"
#include "riskkit/data.hpp"
#include "riskkit/eval.hpp"
#include "riskkit/wrapper.hpp"

namespace riskkit {

enum class Suite { cubic, uci, mislabel, ood, adversarial };

std::string_view to_string(Suite suite);
Suite parse_suite(std::string_view name);

struct UciDatasetSpec {
  std::string name;
  std::string path;  // as written in the config
  std::string target;
};

struct BenchmarkConfig {
  Suite suite = Suite::uci;
  std::size_t trials = 5;
  std::uint64_t seed = 0;
  std::vector<std::string> wrappers;
  std::vector<std::size_t> hidden;
  TrainConfig train;
  std::optional<std::size_t> samples;
  // Relative data paths are resolved against this directory.
  std::filesystem::path base_dir = ".";

  // uci
  std::vector<UciDatasetSpec> datasets;
  double split_fraction = 0.9;
  // cubic
  std::size_t n_train = 1000;
  std::size_t n_test = 241;
  CubicOptions cubic;
  // mislabel
  std::string images;
  std::string labels;
  std::size_t per_class = 0;  // 0 keeps every image
  std::size_t source_class = 7;
  std::size_t target_class = 8;
  std::vector<double> probabilities{0.1, 0.2, 0.3, 0.4, 0.5};
  double headline_probability = 0.2;
  // ood / adversarial
  ShiftOptions shift;
  std::size_t n_ood = 500;
  std::vector<double> epsilons{0.0, 0.1, 0.25, 0.5, 1.0};
  ValueRange clamp;

  // Suite defaults for every field the file leaves out.
  static BenchmarkConfig defaults(Suite suite);
  static BenchmarkConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = ".");
  static BenchmarkConfig load(const std::filesystem::path& path);
  std::filesystem::path resolve(const std::string& path) const;
  std::uint64_t trial_seed(std::size_t trial) const;
  // Config errors, then missing-dataset errors.
  void validate() const;
  nlohmann::json to_json() const;
};

struct BenchmarkResult {
  std::string suite;
  std::string dataset;
  std::string wrapper;
  std::map<std::string, Summary> metrics;
  std::map<std::string, std::vector<double>> trial_values;
  std::vector<std::uint64_t> trial_seeds;
  std::optional<double> wall_clock_seconds;
  nlohmann::json config;

  nlohmann::json to_json() const;
};

struct BenchmarkOutput {
  std::vector<BenchmarkResult> results;
  // Plot-ready columnar files, name -> contents.
  std::map<std::string, std::string> figures;
  nlohmann::json config;
};

struct BenchmarkOptions {
  bool timing = false;
  std::function<void(const std::string&)> progress;
};

BenchmarkOutput run_benchmark(const BenchmarkConfig& config, const BenchmarkOptions& options = {});

// results.json, results.csv and every figure file.
void write_benchmark(const std::filesystem::path& out_dir, const BenchmarkOutput& output);
std::string results_csv(const std::vector<BenchmarkResult>& results);

// Gaussian predictive (mu, sigma) from a risk output, if it carries one:
// mixture moments of its components, else the MVE sigma.
std::optional<std::pair<Tensor, Tensor>> gaussian_predictive(const RiskOutput& output);
// Per-sample score of the first epistemic metric (dropout, ensemble, vae),
// falling back to the first metric.
Tensor primary_risk(const RiskOutput& output, const std::vector<MetricConfig>& metrics);

}  // namespace riskkit
