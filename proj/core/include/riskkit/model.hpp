#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "riskkit/random.hpp"
#include "riskkit/tensor.hpp"

namespace riskkit {

enum class LayerKind { dense, relu, dropout, softmax_output };

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  double dropout_rate = 0.0;

  static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::dense, in, out, 0.0}; }
  static LayerSpec relu(std::size_t dim) { return {LayerKind::relu, dim, dim, 0.0}; }
  static LayerSpec dropout(std::size_t dim, double rate) { return {LayerKind::dropout, dim, dim, rate}; }
  static LayerSpec softmax_output(std::size_t dim) { return {LayerKind::softmax_output, dim, dim, 0.0}; }

  void validate() const;
  bool operator==(const LayerSpec&) const = default;
};

// A layer is its spec plus, for dense layers, weight [in, out] and bias [out].
struct Layer {
  LayerSpec spec;
  Tensor weight;
  Tensor bias;
};

enum class Mode { train, infer };

struct ForwardOptions {
  Mode mode = Mode::infer;
  std::uint64_t seed = 0;
  // Keep dropout active in infer mode (MC sampling).
  bool stochastic = false;
};

/// The unwrapped model: an ordered stack of layers over shared parameter
/// handles. Copying a SequentialModel aliases its parameters; deep_copy()
/// does not.
class SequentialModel {
 public:
  SequentialModel() = default;
  explicit SequentialModel(std::vector<Layer> layers);

  // Fresh Glorot-uniform weights and zero biases drawn from `seed`.
  static SequentialModel from_specs(const std::vector<LayerSpec>& specs, std::uint64_t seed);
  // dense/relu stack; optional softmax-output layer for classifiers.
  static SequentialModel mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                             std::size_t output_dim, std::uint64_t seed, bool softmax_output = false);

  bool empty() const { return layers_.empty(); }
  std::size_t size() const { return layers_.size(); }
  std::size_t input_dim() const;
  std::size_t output_dim() const;

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<LayerSpec> specs() const;
  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters(std::string_view prefix = "") const;
  bool has_stochastic_layers() const;

  Tensor forward(const Tensor& x, const ForwardOptions& options = {}) const;
  Tensor forward(const Tensor& x, Mode mode, bool stochastic, Rng& rng) const;

  SequentialModel deep_copy() const;
  // Layers [begin, end), sharing parameters.
  SequentialModel slice(std::size_t begin, std::size_t end) const;
  // This stack followed by `next`, sharing parameters.
  SequentialModel then(const SequentialModel& next) const;

 private:
  std::vector<Layer> layers_;
};

struct FeatureExtractor {
  SequentialModel backbone;
  std::size_t feature_dim = 0;

  Tensor forward(const Tensor& x, Mode mode, bool stochastic, Rng& rng) const {
    return backbone.forward(x, mode, stochastic, rng);
  }
};

// Index of the last dense layer; the head is that layer plus any trailing
// parameter-free output layers.
std::size_t default_split_index(const SequentialModel& model);

std::pair<FeatureExtractor, SequentialModel> split_feature_extractor(
    const SequentialModel& model, std::optional<std::size_t> split_index = std::nullopt);

SequentialModel clone_reinitialized(const SequentialModel& model, std::uint64_t seed);

/// Decoder that reverses the extractor's dense stack: latent -> ... -> input.
/// The leading latent->feature layer is omitted when latent_dim equals the
/// feature dimension. Dropout layers are not mirrored.
SequentialModel mirror_decoder(const FeatureExtractor& extractor, std::size_t latent_dim,
                               std::uint64_t seed);

// Inserts a dropout layer after every dense layer (new stack, same parameters).
SequentialModel insert_dropout(const SequentialModel& model, double rate);

}  // namespace riskkit
