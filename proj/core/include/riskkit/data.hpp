#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "riskkit/tensor.hpp"

namespace riskkit {

enum class TaskKind { regression, classification };

std::string_view to_string(TaskKind kind);

// Training or evaluation rows. For classification y is one-hot and labels
// holds the class indices.
struct Examples {
  Tensor x;
  Tensor y;
  std::vector<std::size_t> labels;

  std::size_t size() const { return x.defined() ? x.rows() : 0; }
  Examples subset(std::span<const std::size_t> rows) const;
};

// Per-column z-score. Columns with zero spread keep std = 1.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const Tensor& data);
  static Standardizer identity(std::size_t cols);
  bool empty() const { return mean.empty(); }
  Tensor apply(const Tensor& data) const;
  Tensor invert(const Tensor& data) const;
  // Scales a spread (sigma, not variance) back to raw units.
  Tensor invert_scale(const Tensor& spread) const;
  nlohmann::json to_json() const;
  static Standardizer from_json(const nlohmann::json& j);
};

struct Dataset {
  std::string name;
  std::string source;
  TaskKind task = TaskKind::regression;
  Tensor x;  // raw features [n, d_in]
  Tensor y;  // raw targets [n, d_out], or one-hot [n, classes]
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::vector<std::string> feature_names;
  std::vector<std::size_t> train_index;
  std::vector<std::size_t> test_index;
  Standardizer x_norm;
  Standardizer y_norm;
  std::uint64_t seed = 0;
  double split_fraction = 1.0;
  nlohmann::json generator = nlohmann::json::object();

  std::size_t size() const { return x.defined() ? x.rows() : 0; }
  std::size_t input_dim() const { return x.cols(); }
  std::size_t output_dim() const { return y.cols(); }

  // Rows of the split, passed through the train-split standardizers.
  Examples train() const;
  Examples test() const;
  Examples rows(std::span<const std::size_t> index) const;

  // Recomputes train-only normalization statistics (both standardizers when
  // the flags say so; otherwise identity).
  void normalize(bool features, bool targets);

  nlohmann::json manifest() const;
};

// Deterministic shuffled split: round(fraction * n) rows go to train.
void assign_split(Dataset& dataset, double split_fraction, std::uint64_t seed);

enum class CubicForm { cubic, linear };

struct CubicOptions {
  CubicForm form = CubicForm::cubic;
  double noise_center = 1.5;
  double noise_width = 0.9;
  // Peak noise std = noise_peak_fraction * |noise_center|^3 (cubic) or * |noise_center| (linear).
  double noise_peak_fraction = 0.9;
  double noise_baseline = 0.1;
  // Multiplies every noise std; 0 gives the noise-free generator.
  double noise_scale = 1.0;
  double train_lo = -4.0;
  double train_hi = 4.0;
  double test_lo = -6.0;
  double test_hi = 6.0;

  double noise_std(double x) const;
  double mean(double x) const;
  nlohmann::json to_json() const;
};

// Train x uniform in [train_lo, train_hi]; test x an evenly spaced grid over
// [test_lo, test_hi] including both endpoints. Both splits are standardized
// with train statistics.
Dataset make_cubic(std::size_t n_train, std::size_t n_test, std::uint64_t seed, const CubicOptions& options = {});

// Target column by header name, or by zero-based index when no header cell
// matches and the string is an integer.
Dataset load_csv_regression(const std::filesystem::path& path, const std::string& target_column,
                            double split_fraction, std::uint64_t seed);

// Header plus numeric rows, RFC-4180 quoting. Throws DataError with line
// numbers (parse) or cell coordinates (missing value).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};
CsvTable read_numeric_csv(const std::filesystem::path& path);
CsvTable parse_numeric_csv(const std::string& text, const std::string& origin);

struct CorruptionSpec {
  std::size_t source_class = 7;
  std::size_t target_class = 8;
  double probability = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

// mask[i] is true when row i was relabeled.
std::pair<Dataset, std::vector<bool>> corrupt_labels(const Dataset& dataset, const CorruptionSpec& spec);

// Images flattened to [n, rows*cols] and scaled to [0, 1]; every row lands in
// the train split.
Dataset load_idx_images(const std::filesystem::path& images, const std::filesystem::path& labels);

// Keeps at most `per_class` rows of every class (first occurrences).
Dataset take_per_class(const Dataset& dataset, std::size_t per_class);

struct ShiftOptions {
  std::size_t dim = 4;
  double shift = 4.0;
  double noise = 0.1;
};

// In-distribution x ~ N(0, I) with a smooth nonlinear target; the OOD set is
// the same generator shifted by `shift` along every axis. OOD rows are
// standardized with the in-distribution train stats.
struct ShiftedData {
  Dataset in_distribution;
  Examples out_of_distribution;
};
ShiftedData make_shifted_tabular(std::size_t n_train, std::size_t n_test, std::size_t n_ood, std::uint64_t seed,
                                 const ShiftOptions& options = {});

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes);

// Fisher-Yates permutation of [0, n).
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);
// n draws with replacement, P(i) proportional to weights[i].
std::vector<std::size_t> weighted_indices(const std::vector<double>& weights, std::size_t n, std::uint64_t seed);

}  // namespace riskkit
