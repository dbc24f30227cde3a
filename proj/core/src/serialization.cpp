#include "riskkit/serialization.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "riskkit/errors.hpp"

namespace riskkit {

namespace {

constexpr std::array<char, 8> kMagic{'R', 'K', 'C', 'K', 'P', 'T', '0', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

const Tensor& Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw DataError("checkpoint has no parameter '" + name + "'");
}

void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors,
                      nlohmann::json extra_header) {
  nlohmann::json header = std::move(extra_header);
  header["format"] = "riskkit-checkpoint";
  header["version"] = 1;
  header["params"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    header["params"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.numel()}});
    offset += t.numel();
  }
  const std::string header_text = header.dump();

  std::string blob(kMagic.begin(), kMagic.end());
  put_u64(blob, header_text.size());
  blob += header_text;
  blob.reserve(blob.size() + offset * 8);
  for (const auto& [name, t] : tensors) {
    for (double v : t.values()) put_u64(blob, std::bit_cast<std::uint64_t>(v));
  }
  write_text_file(path, blob);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const std::string blob = read_text_file(path);
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  if (blob.size() < 16 || std::memcmp(blob.data(), kMagic.data(), kMagic.size()) != 0) {
    throw DataError(path.string() + ": not a riskkit checkpoint");
  }
  const std::uint64_t header_len = get_u64(bytes + 8);
  if (16 + header_len > blob.size()) throw DataError(path.string() + ": truncated checkpoint header");
  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(blob.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  const std::size_t payload = 16 + header_len;
  const std::size_t available = (blob.size() - payload) / 8;
  for (const auto& p : ckpt.header.at("params")) {
    const auto shape = p.at("shape").get<Shape>();
    const auto offset = p.at("offset").get<std::size_t>();
    const auto count = p.at("count").get<std::size_t>();
    if (offset + count > available || shape_numel(shape) != count) {
      throw DataError(path.string() + ": parameter '" + p.at("name").get<std::string>() + "' out of range");
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
      values[i] = std::bit_cast<double>(get_u64(bytes + payload + 8 * (offset + i)));
    }
    ckpt.tensors.emplace_back(p.at("name").get<std::string>(), Tensor(shape, std::move(values), true));
  }
  return ckpt;
}

nlohmann::json architecture_to_json(const std::vector<LayerSpec>& specs) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& s : specs) {
    nlohmann::json l{{"kind", to_string(s.kind)}, {"in_dim", s.in_dim}, {"out_dim", s.out_dim}};
    if (s.kind == LayerKind::dropout) l["dropout_rate"] = s.dropout_rate;
    layers.push_back(std::move(l));
  }
  return {{"layers", std::move(layers)}};
}

std::vector<LayerSpec> architecture_from_json(const nlohmann::json& j) {
  std::vector<LayerSpec> specs;
  try {
    for (const auto& l : j.at("layers")) {
      LayerSpec s;
      s.kind = parse_layer_kind(l.at("kind").get<std::string>());
      s.in_dim = l.at("in_dim").get<std::size_t>();
      s.out_dim = l.at("out_dim").get<std::size_t>();
      s.dropout_rate = l.value("dropout_rate", 0.0);
      s.validate();
      specs.push_back(s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed architecture JSON: ") + e.what());
  }
  return specs;
}

void load_parameters(const NamedTensors& targets, const Checkpoint& ckpt) {
  for (const auto& [name, target] : targets) {
    const Tensor& src = ckpt.find(name);
    if (src.shape() != target.shape()) {
      throw DataError("checkpoint parameter '" + name + "' has shape " + shape_string(src.shape()) +
                      ", expected " + shape_string(target.shape()));
    }
    Tensor dst = target;
    std::copy(src.values().begin(), src.values().end(), dst.mutable_values().begin());
  }
}

void load_parameters(const SequentialModel& model, const Checkpoint& ckpt, const std::string& prefix) {
  load_parameters(model.named_parameters(prefix), ckpt);
}

void save_model(const std::filesystem::path& path, const SequentialModel& model) {
  write_checkpoint(path, model.named_parameters(), {{"architecture", architecture_to_json(model.specs())}});
}

SequentialModel load_model(const std::filesystem::path& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  if (!ckpt.header.contains("architecture")) {
    throw DataError(path.string() + ": checkpoint carries no architecture");
  }
  auto model = SequentialModel::from_specs(architecture_from_json(ckpt.header.at("architecture")), 0);
  load_parameters(model, ckpt);
  return model;
}

void write_text_file(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace riskkit
