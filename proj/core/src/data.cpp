#include "riskkit/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <optional>

#include "riskkit/errors.hpp"
#include "riskkit/random.hpp"
#include "riskkit/serialization.hpp"

namespace riskkit {

namespace {

std::vector<double> gather(const Tensor& t, std::span<const std::size_t> rows) {
  const std::size_t c = t.cols();
  std::vector<double> out;
  out.reserve(rows.size() * c);
  const auto v = t.values();
  for (auto r : rows) {
    if (r >= t.rows()) throw DataError("row index " + std::to_string(r) + " out of range");
    out.insert(out.end(), v.begin() + static_cast<std::ptrdiff_t>(r * c),
               v.begin() + static_cast<std::ptrdiff_t>((r + 1) * c));
  }
  return out;
}

Tensor gather_tensor(const Tensor& t, std::span<const std::size_t> rows) {
  return Tensor::matrix(rows.size(), t.cols(), gather(t, rows));
}

std::vector<double> standard_normals(Rng& rng, std::size_t n) {
  std::vector<double> out(n);
  for (auto& v : out) v = rng.normal();
  return out;
}

bool is_missing(std::string_view cell) {
  auto b = cell.find_first_not_of(" \t");
  if (b == std::string_view::npos) return true;
  auto e = cell.find_last_not_of(" \t");
  cell = cell.substr(b, e - b + 1);
  return cell == "NA" || cell == "NaN" || cell == "nan" || cell == "?";
}

std::optional<double> parse_number(std::string_view cell) {
  auto b = cell.find_first_not_of(" \t");
  auto e = cell.find_last_not_of(" \t");
  if (b == std::string_view::npos) return std::nullopt;
  cell = cell.substr(b, e - b + 1);
  if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
  double v = 0.0;
  auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc() || res.ptr != cell.data() + cell.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// Splits one logical record starting at `pos`; advances `pos` and `line`.
std::vector<std::string> next_record(const std::string& text, std::size_t& pos, std::size_t& line,
                                     const std::string& origin) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  const std::size_t start_line = line;
  while (pos < text.size()) {
    const char c = text[pos];
    if (quoted) {
      if (c == '"') {
        if (pos + 1 < text.size() && text[pos + 1] == '"') {
          field.push_back('"');
          pos += 2;
          continue;
        }
        quoted = false;
        ++pos;
        continue;
      }
      if (c == '\n') ++line;
      field.push_back(c);
      ++pos;
      continue;
    }
    if (c == '"') {
      if (!field.empty()) {
        throw DataError(origin + ":" + std::to_string(line) + ": stray quote inside unquoted field");
      }
      quoted = true;
      ++pos;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
      ++pos;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && pos + 1 < text.size() && text[pos + 1] == '\n') ++pos;
      ++pos;
      ++line;
      fields.push_back(std::move(field));
      return fields;
    } else {
      field.push_back(c);
      ++pos;
    }
  }
  if (quoted) throw DataError(origin + ":" + std::to_string(start_line) + ": unterminated quoted field");
  fields.push_back(std::move(field));
  ++line;
  return fields;
}

}  // namespace

std::string_view to_string(TaskKind kind) {
  return kind == TaskKind::regression ? "regression" : "classification";
}

Examples Examples::subset(std::span<const std::size_t> rows) const {
  Examples out;
  out.x = gather_tensor(x, rows);
  out.y = gather_tensor(y, rows);
  if (!labels.empty()) {
    for (auto r : rows) out.labels.push_back(labels.at(r));
  }
  return out;
}

Standardizer Standardizer::fit(const Tensor& data) {
  const std::size_t n = data.rows(), c = data.cols();
  if (n == 0) throw DataError("cannot standardize an empty split");
  Standardizer s;
  s.mean.assign(c, 0.0);
  s.stddev.assign(c, 0.0);
  const auto v = data.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) s.mean[j] += v[i * c + j];
  }
  for (auto& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double d = v[i * c + j] - s.mean[j];
      s.stddev[j] += d * d;
    }
  }
  for (auto& sd : s.stddev) {
    sd = n > 1 ? std::sqrt(sd / static_cast<double>(n - 1)) : 0.0;
    if (!(sd > 0.0)) sd = 1.0;
  }
  return s;
}

Standardizer Standardizer::identity(std::size_t cols) {
  return {std::vector<double>(cols, 0.0), std::vector<double>(cols, 1.0)};
}

Tensor Standardizer::apply(const Tensor& data) const {
  if (empty()) return data.detach();
  if (data.cols() != mean.size()) throw ShapeError("standardizer column count mismatch");
  std::vector<double> out(data.values().begin(), data.values().end());
  const std::size_t c = mean.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - mean[i % c]) / stddev[i % c];
  return Tensor(data.shape(), std::move(out));
}

Tensor Standardizer::invert(const Tensor& data) const {
  if (empty()) return data.detach();
  if (data.cols() != mean.size()) throw ShapeError("standardizer column count mismatch");
  std::vector<double> out(data.values().begin(), data.values().end());
  const std::size_t c = mean.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * stddev[i % c] + mean[i % c];
  return Tensor(data.shape(), std::move(out));
}

Tensor Standardizer::invert_scale(const Tensor& spread) const {
  if (empty()) return spread.detach();
  if (spread.cols() != mean.size()) throw ShapeError("standardizer column count mismatch");
  std::vector<double> out(spread.values().begin(), spread.values().end());
  const std::size_t c = mean.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= stddev[i % c];
  return Tensor(spread.shape(), std::move(out));
}

nlohmann::json Standardizer::to_json() const { return {{"mean", mean}, {"std", stddev}}; }

Standardizer Standardizer::from_json(const nlohmann::json& j) {
  Standardizer s;
  if (j.is_null()) return s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("std").get<std::vector<double>>();
  return s;
}

Examples Dataset::rows(std::span<const std::size_t> index) const {
  Examples e;
  e.x = x_norm.apply(gather_tensor(x, index));
  if (task == TaskKind::regression) {
    e.y = y_norm.apply(gather_tensor(y, index));
  } else {
    e.y = gather_tensor(y, index);
    for (auto r : index) e.labels.push_back(labels.at(r));
  }
  return e;
}

Examples Dataset::train() const { return rows(train_index); }
Examples Dataset::test() const { return rows(test_index); }

void Dataset::normalize(bool features, bool targets) {
  if (train_index.empty()) throw DataError(name + ": train split is empty");
  x_norm = features ? Standardizer::fit(gather_tensor(x, train_index)) : Standardizer{};
  y_norm = (targets && task == TaskKind::regression) ? Standardizer::fit(gather_tensor(y, train_index))
                                                     : Standardizer{};
}

nlohmann::json Dataset::manifest() const {
  nlohmann::json j{{"name", name},
                   {"source", source},
                   {"task", to_string(task)},
                   {"rows", size()},
                   {"input_dim", input_dim()},
                   {"output_dim", output_dim()},
                   {"seed", seed},
                   {"split_fraction", split_fraction},
                   {"train_rows", train_index.size()},
                   {"test_rows", test_index.size()},
                   {"x_normalization", x_norm.empty() ? nlohmann::json(nullptr) : x_norm.to_json()},
                   {"y_normalization", y_norm.empty() ? nlohmann::json(nullptr) : y_norm.to_json()},
                   {"generator", generator}};
  if (task == TaskKind::classification) j["num_classes"] = num_classes;
  if (!feature_names.empty()) j["feature_names"] = feature_names;
  return j;
}

void assign_split(Dataset& dataset, double split_fraction, std::uint64_t seed) {
  if (!(split_fraction > 0.0 && split_fraction <= 1.0)) {
    throw ConfigError("split fraction must lie in (0, 1]");
  }
  const std::size_t n = dataset.size();
  const std::vector<std::size_t> order = shuffled_indices(n, derive_seed(seed, 0x5151));
  const auto n_train = static_cast<std::size_t>(std::llround(split_fraction * static_cast<double>(n)));
  dataset.train_index.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  dataset.test_index.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  dataset.seed = seed;
  dataset.split_fraction = split_fraction;
}

double CubicOptions::mean(double x) const { return form == CubicForm::cubic ? x * x * x : x; }

double CubicOptions::noise_std(double x) const {
  const double c = std::abs(noise_center);
  const double peak = noise_peak_fraction * (form == CubicForm::cubic ? c * c * c : c);
  const double z = (x - noise_center) / noise_width;
  return noise_scale * (noise_baseline + peak * std::exp(-0.5 * z * z));
}

nlohmann::json CubicOptions::to_json() const {
  return {{"form", form == CubicForm::cubic ? "cubic" : "linear"},
          {"noise_center", noise_center},
          {"noise_width", noise_width},
          {"noise_peak_fraction", noise_peak_fraction},
          {"noise_baseline", noise_baseline},
          {"noise_scale", noise_scale},
          {"train_range", {train_lo, train_hi}},
          {"test_range", {test_lo, test_hi}}};
}

Dataset make_cubic(std::size_t n_train, std::size_t n_test, std::uint64_t seed, const CubicOptions& options) {
  if (n_train < 2 || n_test < 2) throw ConfigError("cubic generator needs at least 2 train and 2 test points");
  Rng rng(derive_seed(seed, 0xC0BE));
  std::vector<double> xs, ys;
  xs.reserve(n_train + n_test);
  for (std::size_t i = 0; i < n_train; ++i) xs.push_back(rng.uniform(options.train_lo, options.train_hi));
  for (std::size_t i = 0; i < n_test; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(n_test - 1);
    xs.push_back(i + 1 == n_test ? options.test_hi : options.test_lo + t * (options.test_hi - options.test_lo));
  }
  for (double x : xs) {
    const double s = options.noise_std(x);
    const double eps = rng.normal();
    ys.push_back(options.mean(x) + (s > 0.0 ? s * eps : 0.0));
  }
  Dataset d;
  d.name = options.form == CubicForm::cubic ? "cubic" : "linear";
  d.source = "generated";
  const std::size_t n = xs.size();
  d.x = Tensor::matrix(n, 1, std::move(xs));
  d.y = Tensor::matrix(n, 1, std::move(ys));
  d.feature_names = {"x"};
  d.train_index.resize(n_train);
  std::iota(d.train_index.begin(), d.train_index.end(), 0);
  d.test_index.resize(n_test);
  std::iota(d.test_index.begin(), d.test_index.end(), n_train);
  d.seed = seed;
  d.split_fraction = static_cast<double>(n_train) / static_cast<double>(n_train + n_test);
  d.generator = options.to_json();
  d.generator["n_train"] = n_train;
  d.generator["n_test"] = n_test;
  d.normalize(true, true);
  return d;
}

CsvTable parse_numeric_csv(const std::string& text, const std::string& origin) {
  CsvTable table;
  std::size_t pos = 0, line = 1;
  if (text.empty()) throw DataError(origin + ": empty file (header row required)");
  table.header = next_record(text, pos, line, origin);
  if (table.header.size() == 1 && table.header[0].empty()) throw DataError(origin + ":1: empty header row");
  while (pos < text.size()) {
    const std::size_t record_line = line;
    auto fields = next_record(text, pos, line, origin);
    if (fields.size() == 1 && fields[0].empty()) continue;  // blank line
    if (fields.size() != table.header.size()) {
      throw DataError(origin + ":" + std::to_string(record_line) + ": expected " +
                      std::to_string(table.header.size()) + " fields, found " + std::to_string(fields.size()));
    }
    std::vector<double> row(fields.size());
    for (std::size_t c = 0; c < fields.size(); ++c) {
      if (is_missing(fields[c])) {
        throw DataError(origin + ": missing value at line " + std::to_string(record_line) + ", column " +
                        std::to_string(c + 1) + " ('" + table.header[c] + "')");
      }
      auto v = parse_number(fields[c]);
      if (!v) {
        throw DataError(origin + ":" + std::to_string(record_line) + ": cannot parse '" + fields[c] +
                        "' as a number in column '" + table.header[c] + "'");
      }
      row[c] = *v;
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

CsvTable read_numeric_csv(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("dataset not found: " + path.string());
  return parse_numeric_csv(read_text_file(path), path.string());
}

Dataset load_csv_regression(const std::filesystem::path& path, const std::string& target_column,
                            double split_fraction, std::uint64_t seed) {
  const CsvTable table = read_numeric_csv(path);
  if (table.rows.empty()) throw DataError(path.string() + ": dataset has a header but no rows");
  if (table.header.size() < 2) throw DataError(path.string() + ": need at least one feature and a target");
  std::size_t target = table.header.size();
  for (std::size_t c = 0; c < table.header.size(); ++c) {
    if (table.header[c] == target_column) target = c;
  }
  if (target == table.header.size()) {
    std::size_t idx = 0;
    auto res = std::from_chars(target_column.data(), target_column.data() + target_column.size(), idx);
    if (res.ec != std::errc() || res.ptr != target_column.data() + target_column.size() ||
        idx >= table.header.size()) {
      throw DataError(path.string() + ": target column '" + target_column + "' not present");
    }
    target = idx;
  }
  const std::size_t n = table.rows.size(), d = table.header.size() - 1;
  std::vector<double> xs, ys;
  xs.reserve(n * d);
  ys.reserve(n);
  for (const auto& row : table.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c == target) {
        ys.push_back(row[c]);
      } else {
        xs.push_back(row[c]);
      }
    }
  }
  Dataset ds;
  ds.name = path.stem().string();
  ds.source = path.string();
  ds.x = Tensor::matrix(n, d, std::move(xs));
  ds.y = Tensor::matrix(n, 1, std::move(ys));
  for (std::size_t c = 0; c < table.header.size(); ++c) {
    if (c != target) ds.feature_names.push_back(table.header[c]);
  }
  ds.generator = {{"target_column", table.header[target]}};
  assign_split(ds, split_fraction, seed);
  ds.normalize(true, true);
  return ds;
}

void CorruptionSpec::validate() const {
  if (source_class == target_class) throw ConfigError("corruption source and target classes must differ");
  if (!(probability >= 0.0 && probability <= 1.0)) throw ConfigError("corruption probability must lie in [0, 1]");
}

std::pair<Dataset, std::vector<bool>> corrupt_labels(const Dataset& dataset, const CorruptionSpec& spec) {
  spec.validate();
  if (dataset.task != TaskKind::classification) throw ConfigError("corrupt_labels needs a classification dataset");
  if (spec.source_class >= dataset.num_classes || spec.target_class >= dataset.num_classes) {
    throw ConfigError("corruption classes must exist in the dataset");
  }
  Dataset out = dataset;
  std::vector<bool> mask(dataset.size(), false);
  Rng rng(derive_seed(spec.seed, 0xBAD));
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    if (out.labels[i] != spec.source_class) continue;
    // One draw per source-class row keeps the stream aligned across p.
    const double u = rng.uniform();
    if (u < spec.probability) {
      out.labels[i] = spec.target_class;
      mask[i] = true;
    }
  }
  out.y = one_hot(out.labels, out.num_classes);
  out.generator["corruption"] = {{"source_class", spec.source_class},
                                 {"target_class", spec.target_class},
                                 {"probability", spec.probability},
                                 {"seed", spec.seed}};
  return {std::move(out), std::move(mask)};
}

namespace {

std::uint32_t read_be32(const std::string& blob, std::size_t offset, const std::string& origin) {
  if (offset + 4 > blob.size()) throw DataError(origin + ": truncated IDX header");
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(blob[offset + i]);
  return v;
}

}  // namespace

Dataset load_idx_images(const std::filesystem::path& images, const std::filesystem::path& labels) {
  if (!std::filesystem::exists(images)) throw DataError("dataset not found: " + images.string());
  if (!std::filesystem::exists(labels)) throw DataError("dataset not found: " + labels.string());
  const std::string img = read_text_file(images);
  const std::string lab = read_text_file(labels);
  const std::string io = images.string(), lo = labels.string();
  if (read_be32(img, 0, io) != 0x00000803u) throw DataError(io + ": bad IDX image magic number");
  if (read_be32(lab, 0, lo) != 0x00000801u) throw DataError(lo + ": bad IDX label magic number");
  const std::size_t n = read_be32(img, 4, io);
  const std::size_t rows = read_be32(img, 8, io);
  const std::size_t cols = read_be32(img, 12, io);
  const std::size_t n_labels = read_be32(lab, 4, lo);
  if (n_labels != n) {
    throw DataError(lo + ": label count " + std::to_string(n_labels) + " does not match image count " +
                    std::to_string(n));
  }
  const std::size_t pixels = rows * cols;
  if (img.size() < 16 + n * pixels) throw DataError(io + ": truncated image data");
  if (lab.size() < 8 + n) throw DataError(lo + ": truncated label data");

  std::vector<double> xs(n * pixels);
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = static_cast<unsigned char>(img[16 + i]) / 255.0;
  Dataset ds;
  ds.name = images.stem().string();
  ds.source = io;
  ds.task = TaskKind::classification;
  ds.x = Tensor::matrix(n, pixels, std::move(xs));
  ds.labels.resize(n);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = static_cast<unsigned char>(lab[8 + i]);
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = n ? max_label + 1 : 0;
  ds.y = one_hot(ds.labels, ds.num_classes);
  ds.train_index.resize(n);
  std::iota(ds.train_index.begin(), ds.train_index.end(), 0);
  ds.generator = {{"image_rows", rows}, {"image_cols", cols}};
  return ds;
}

Dataset take_per_class(const Dataset& dataset, std::size_t per_class) {
  if (dataset.task != TaskKind::classification) throw ConfigError("take_per_class needs a classification dataset");
  std::vector<std::size_t> counts(dataset.num_classes, 0), keep;
  for (std::size_t i = 0; i < dataset.labels.size(); ++i) {
    if (counts[dataset.labels[i]]++ < per_class) keep.push_back(i);
  }
  Dataset out = dataset;
  out.x = gather_tensor(dataset.x, keep);
  out.labels.clear();
  for (auto i : keep) out.labels.push_back(dataset.labels[i]);
  out.y = one_hot(out.labels, out.num_classes);
  out.train_index.resize(keep.size());
  std::iota(out.train_index.begin(), out.train_index.end(), 0);
  out.test_index.clear();
  out.generator["per_class"] = per_class;
  return out;
}

ShiftedData make_shifted_tabular(std::size_t n_train, std::size_t n_test, std::size_t n_ood, std::uint64_t seed,
                                 const ShiftOptions& options) {
  if (options.dim == 0 || n_train < 2 || n_test == 0 || n_ood == 0) {
    throw ConfigError("shifted tabular generator needs dim >= 1, n_train >= 2 and non-empty test/OOD sets");
  }
  Rng rng(derive_seed(seed, 0x0D));
  const std::size_t d = options.dim;
  auto target = [&](const double* x) {
    double y = 0.0;
    for (std::size_t k = 0; k < d; ++k) y += std::sin(x[k]) + 0.1 * x[k] * x[k];
    return y + options.noise * rng.normal();
  };
  const std::size_t n = n_train + n_test;
  std::vector<double> xs = standard_normals(rng, n * d), ys(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = target(&xs[i * d]);
  std::vector<double> ox = standard_normals(rng, n_ood * d), oy(n_ood);
  for (auto& v : ox) v += options.shift;
  for (std::size_t i = 0; i < n_ood; ++i) oy[i] = target(&ox[i * d]);

  ShiftedData out;
  Dataset& ds = out.in_distribution;
  ds.name = "shifted-tabular";
  ds.source = "generated";
  ds.x = Tensor::matrix(n, d, std::move(xs));
  ds.y = Tensor::matrix(n, 1, std::move(ys));
  ds.train_index.resize(n_train);
  std::iota(ds.train_index.begin(), ds.train_index.end(), 0);
  ds.test_index.resize(n_test);
  std::iota(ds.test_index.begin(), ds.test_index.end(), n_train);
  ds.seed = seed;
  ds.split_fraction = static_cast<double>(n_train) / static_cast<double>(n);
  ds.generator = {{"dim", d}, {"shift", options.shift}, {"noise", options.noise}, {"n_ood", n_ood}};
  ds.normalize(true, true);
  out.out_of_distribution.x = ds.x_norm.apply(Tensor::matrix(n_ood, d, std::move(ox)));
  out.out_of_distribution.y = ds.y_norm.apply(Tensor::matrix(n_ood, 1, std::move(oy)));
  return out;
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  std::vector<double> v(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw DataError("label " + std::to_string(labels[i]) + " out of range");
    v[i * classes + labels[i]] = 1.0;
  }
  return Tensor::matrix(labels.size(), classes, std::move(v));
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

std::vector<std::size_t> weighted_indices(const std::vector<double>& weights, std::size_t n, std::uint64_t seed) {
  if (weights.empty()) throw ConfigError("weighted sampling needs at least one weight");
  std::vector<double> cumulative(weights.size());
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(weights[i] >= 0.0)) throw ConfigError("sampling weights must be nonnegative");
    cumulative[i] = (total += weights[i]);
  }
  if (!(total > 0.0)) throw ConfigError("sampling weights sum to zero");
  Rng rng(seed);
  std::vector<std::size_t> out(n);
  for (auto& o : out) {
    const double u = rng.uniform() * total;
    o = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
    o = std::min(o, weights.size() - 1);
  }
  return out;
}

}  // namespace riskkit
