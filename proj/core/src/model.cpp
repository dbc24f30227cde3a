#include "riskkit/model.hpp"

#include <cmath>

#include "riskkit/errors.hpp"

namespace riskkit {

namespace {

void init_dense(Layer& layer, Rng& rng) {
  const auto in = layer.spec.in_dim;
  const auto out = layer.spec.out_dim;
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> w(in * out);
  for (auto& v : w) v = rng.uniform(-limit, limit);
  layer.weight = Tensor::matrix(in, out, std::move(w), true);
  layer.bias = Tensor::zeros({out}, true);
}

std::string layer_label(std::size_t index, const LayerSpec& spec) {
  return "layer " + std::to_string(index) + " (" + std::string(to_string(spec.kind)) + ")";
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense:
      return "dense";
    case LayerKind::relu:
      return "relu";
    case LayerKind::dropout:
      return "dropout";
    case LayerKind::softmax_output:
      return "softmax-output";
  }
  return "unknown";
}

LayerKind parse_layer_kind(std::string_view name) {
  if (name == "dense") return LayerKind::dense;
  if (name == "relu") return LayerKind::relu;
  if (name == "dropout") return LayerKind::dropout;
  if (name == "softmax-output") return LayerKind::softmax_output;
  throw ConfigError("unknown layer kind '" + std::string(name) + "'");
}

void LayerSpec::validate() const {
  if (in_dim == 0 || out_dim == 0) throw ConfigError("layer dimensions must be positive");
  if (kind != LayerKind::dense && in_dim != out_dim) {
    throw ConfigError(std::string(to_string(kind)) + " layer must preserve its dimension");
  }
  if (kind == LayerKind::dropout && !(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1)");
  }
}

SequentialModel::SequentialModel(std::vector<Layer> layers) : layers_(std::move(layers)) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    l.spec.validate();
    if (i > 0 && layers_[i - 1].spec.out_dim != l.spec.in_dim) {
      throw ShapeError(layer_label(i, l.spec) + " expects " + std::to_string(l.spec.in_dim) +
                       " inputs but previous layer produces " +
                       std::to_string(layers_[i - 1].spec.out_dim));
    }
    if (l.spec.kind == LayerKind::dense) {
      if (!l.weight.defined() || l.weight.shape() != Shape{l.spec.in_dim, l.spec.out_dim} ||
          !l.bias.defined() || l.bias.shape() != Shape{l.spec.out_dim}) {
        throw ShapeError(layer_label(i, l.spec) + " has parameters inconsistent with its spec");
      }
    }
  }
}

SequentialModel SequentialModel::from_specs(const std::vector<LayerSpec>& specs, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Layer> layers;
  layers.reserve(specs.size());
  for (const auto& s : specs) {
    s.validate();
    Layer l{s, {}, {}};
    if (s.kind == LayerKind::dense) init_dense(l, rng);
    layers.push_back(std::move(l));
  }
  return SequentialModel(std::move(layers));
}

SequentialModel SequentialModel::mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                                     std::size_t output_dim, std::uint64_t seed, bool softmax_output) {
  std::vector<LayerSpec> specs;
  std::size_t prev = input_dim;
  for (auto h : hidden) {
    specs.push_back(LayerSpec::dense(prev, h));
    specs.push_back(LayerSpec::relu(h));
    prev = h;
  }
  specs.push_back(LayerSpec::dense(prev, output_dim));
  if (softmax_output) specs.push_back(LayerSpec::softmax_output(output_dim));
  return from_specs(specs, seed);
}

std::size_t SequentialModel::input_dim() const {
  if (layers_.empty()) throw ConfigError("empty model has no input dimension");
  return layers_.front().spec.in_dim;
}

std::size_t SequentialModel::output_dim() const {
  if (layers_.empty()) throw ConfigError("empty model has no output dimension");
  return layers_.back().spec.out_dim;
}

std::vector<LayerSpec> SequentialModel::specs() const {
  std::vector<LayerSpec> out;
  out.reserve(layers_.size());
  for (const auto& l : layers_) out.push_back(l.spec);
  return out;
}

std::vector<Tensor> SequentialModel::parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : layers_) {
    if (l.spec.kind == LayerKind::dense) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> SequentialModel::named_parameters(std::string_view prefix) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].spec.kind != LayerKind::dense) continue;
    const std::string base = std::string(prefix) + "layers." + std::to_string(i);
    out.emplace_back(base + ".weight", layers_[i].weight);
    out.emplace_back(base + ".bias", layers_[i].bias);
  }
  return out;
}

bool SequentialModel::has_stochastic_layers() const {
  for (const auto& l : layers_) {
    if (l.spec.kind == LayerKind::dropout && l.spec.dropout_rate > 0.0) return true;
  }
  return false;
}

Tensor SequentialModel::forward(const Tensor& x, const ForwardOptions& options) const {
  Rng rng(options.seed);
  return forward(x, options.mode, options.stochastic, rng);
}

Tensor SequentialModel::forward(const Tensor& x, Mode mode, bool stochastic, Rng& rng) const {
  if (layers_.empty()) throw ConfigError("forward through an empty model");
  if (!x.defined() || x.shape().size() != 2) {
    throw ShapeError("forward expects a [batch, features] input");
  }
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    if (h.cols() != l.spec.in_dim) {
      throw ShapeError(layer_label(i, l.spec) + " expects " + std::to_string(l.spec.in_dim) +
                       " features, got " + std::to_string(h.cols()));
    }
    switch (l.spec.kind) {
      case LayerKind::dense:
        h = add_row(matmul(h, l.weight), l.bias);
        break;
      case LayerKind::relu:
        h = relu(h);
        break;
      case LayerKind::dropout: {
        const bool active = (mode == Mode::train || stochastic) && l.spec.dropout_rate > 0.0;
        if (active) {
          const double keep = 1.0 - l.spec.dropout_rate;
          std::vector<double> mask(h.numel());
          for (auto& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
          h = h * Tensor(h.shape(), std::move(mask));
        }
        break;
      }
      case LayerKind::softmax_output:
        h = softmax_rows(h);
        break;
    }
    if (!all_finite(h.values())) {
      throw NumericError("non-finite activation after " + layer_label(i, l.spec));
    }
  }
  return h;
}

SequentialModel SequentialModel::deep_copy() const {
  std::vector<Layer> layers;
  layers.reserve(layers_.size());
  for (const auto& l : layers_) {
    Layer c{l.spec, {}, {}};
    if (l.weight.defined()) c.weight = l.weight.copy();
    if (l.bias.defined()) c.bias = l.bias.copy();
    layers.push_back(std::move(c));
  }
  return SequentialModel(std::move(layers));
}

SequentialModel SequentialModel::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > layers_.size()) throw ConfigError("slice out of range");
  return SequentialModel(std::vector<Layer>(layers_.begin() + static_cast<std::ptrdiff_t>(begin),
                                            layers_.begin() + static_cast<std::ptrdiff_t>(end)));
}

SequentialModel SequentialModel::then(const SequentialModel& next) const {
  std::vector<Layer> layers = layers_;
  layers.insert(layers.end(), next.layers_.begin(), next.layers_.end());
  return SequentialModel(std::move(layers));
}

std::size_t default_split_index(const SequentialModel& model) {
  const auto& layers = model.layers();
  for (std::size_t i = layers.size(); i-- > 0;) {
    if (layers[i].spec.kind == LayerKind::dense) {
      if (i == 0) break;
      return i;
    }
  }
  throw ConfigError("model has no valid default feature-extractor split (needs a dense layer after "
                    "at least one other layer)");
}

std::pair<FeatureExtractor, SequentialModel> split_feature_extractor(const SequentialModel& model,
                                                                     std::optional<std::size_t> split_index) {
  if (model.size() < 2) {
    throw ConfigError("cannot split a model with fewer than 2 layers into extractor and head");
  }
  const std::size_t split = split_index ? *split_index : default_split_index(model);
  if (split < 1 || split > model.size() - 1) {
    throw ConfigError("split index " + std::to_string(split) + " outside [1, " +
                      std::to_string(model.size() - 1) + "]");
  }
  FeatureExtractor extractor{model.slice(0, split), 0};
  extractor.feature_dim = extractor.backbone.output_dim();
  return {std::move(extractor), model.slice(split, model.size())};
}

SequentialModel clone_reinitialized(const SequentialModel& model, std::uint64_t seed) {
  return SequentialModel::from_specs(model.specs(), seed);
}

SequentialModel mirror_decoder(const FeatureExtractor& extractor, std::size_t latent_dim, std::uint64_t seed) {
  if (latent_dim == 0) throw ConfigError("latent dimension must be positive");
  std::vector<std::size_t> dims;  // dense dims of the extractor: input, h1, ..., feature
  const auto& layers = extractor.backbone.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& s = layers[i].spec;
    switch (s.kind) {
      case LayerKind::dense:
        if (dims.empty()) dims.push_back(s.in_dim);
        dims.push_back(s.out_dim);
        break;
      case LayerKind::relu:
      case LayerKind::dropout:
        break;
      default:
        throw IncompatibleMetricError("cannot mirror " + layer_label(i, s) + " into a decoder");
    }
  }
  if (dims.empty()) throw IncompatibleMetricError("extractor has no dense layers to mirror");

  std::vector<std::size_t> decoder_dims{latent_dim};
  for (auto it = dims.rbegin(); it != dims.rend(); ++it) {
    if (it == dims.rbegin() && *it == latent_dim) continue;
    decoder_dims.push_back(*it);
  }

  std::vector<LayerSpec> specs;
  for (std::size_t i = 0; i + 1 < decoder_dims.size(); ++i) {
    if (i > 0) specs.push_back(LayerSpec::relu(decoder_dims[i]));
    specs.push_back(LayerSpec::dense(decoder_dims[i], decoder_dims[i + 1]));
  }
  return SequentialModel::from_specs(specs, seed);
}

SequentialModel insert_dropout(const SequentialModel& model, double rate) {
  std::vector<Layer> layers;
  for (const auto& l : model.layers()) {
    layers.push_back(l);
    if (l.spec.kind == LayerKind::dense) {
      layers.push_back(Layer{LayerSpec::dropout(l.spec.out_dim, rate), {}, {}});
    }
  }
  return SequentialModel(std::move(layers));
}

}  // namespace riskkit
