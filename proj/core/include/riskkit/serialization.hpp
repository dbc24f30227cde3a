#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "riskkit/model.hpp"
#include "riskkit/tensor.hpp"

namespace riskkit {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Checkpoint file layout:
//   bytes 0..7   magic "RKCKPT01"
//   bytes 8..15  header length H (uint64, little-endian)
//   next H bytes UTF-8 JSON header: {"format", "version", "params": [{name, shape, offset, count}], ...}
//   remainder    parameter payload, float64 little-endian, offsets counted in values
struct Checkpoint {
  nlohmann::json header;
  NamedTensors tensors;

  const Tensor& find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors,
                      nlohmann::json extra_header = nlohmann::json::object());
Checkpoint read_checkpoint(const std::filesystem::path& path);

nlohmann::json architecture_to_json(const std::vector<LayerSpec>& specs);
std::vector<LayerSpec> architecture_from_json(const nlohmann::json& j);

// Copies checkpointed values into the model's existing parameter storage.
void load_parameters(const SequentialModel& model, const Checkpoint& ckpt, const std::string& prefix = "");
void load_parameters(const NamedTensors& targets, const Checkpoint& ckpt);

void save_model(const std::filesystem::path& path, const SequentialModel& model);
SequentialModel load_model(const std::filesystem::path& path);

// Atomic-enough text write used for every JSON/CSV artifact.
void write_text_file(const std::filesystem::path& path, const std::string& contents);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace riskkit
