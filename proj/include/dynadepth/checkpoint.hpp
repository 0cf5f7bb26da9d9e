// Copyright 2026 The dynadepth Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dynadepth/controller.hpp"
#include "dynadepth/hashing.hpp"
#include "dynadepth/model.hpp"
#include "dynadepth/text.hpp"
#include "dynadepth/tokenizer.hpp"

namespace dynadepth {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::ordered_json model_config_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["num_layers"] = cfg.num_layers;
  j["hidden_dim"] = cfg.hidden_dim;
  j["num_heads"] = cfg.num_heads;
  j["ffn_dim"] = cfg.ffn_dim;
  j["vocab_size"] = cfg.vocab_size;
  j["max_context"] = cfg.max_context;
  j["layer_norm_eps"] = cfg.layer_norm_eps;
  j["tokenizer"] = std::string(ByteTokenizer::kId);
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_context = j.at("max_context").get<std::size_t>();
  c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
  if (j.contains("tokenizer") && j["tokenizer"].get<std::string>() != ByteTokenizer::kId) {
    throw CheckpointError("unsupported tokenizer '" + j["tokenizer"].get<std::string>() + "'");
  }
  c.validate();
  return c;
}

/// Content hash identifying a model architecture.
inline std::string model_config_hash(const ModelConfig& cfg) {
  return git_blob_hash(model_config_json(cfg).dump());
}

namespace detail {
inline std::string encode_f32(const Tensor& t) {
  std::string out;
  out.reserve(t.numel() * 4);
  for (double v : t.data()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xffu));
  }
  return out;
}

inline std::vector<double> decode_f32(std::string_view bytes) {
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + k])) << (8 * k);
    out[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return out;
}
}  // namespace detail

struct Checkpoint {
  ModelConfig config;
  ParameterSet params;
  std::optional<Controllers> controllers;

  Model model() const { return Model(config, params); }
};

/// Writes config.json, manifest.json and weights.bin into dir.
inline void save_checkpoint(const std::filesystem::path& dir, const Model& model,
                            const Controllers* controllers = nullptr) {
  std::filesystem::create_directories(dir);
  auto cfg = model_config_json(model.config());
  if (controllers) {
    nlohmann::ordered_json c;
    c["input_mode"] = input_mode_name(controllers->mode());
    c["control_last"] = controllers->control_last();
    cfg["controllers"] = c;
  }
  std::string weights;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  auto emit = [&](const ParameterSet& ps) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const std::string bytes = detail::encode_f32(ps.at(i));
      nlohmann::ordered_json e;
      e["name"] = ps.names()[i];
      e["shape"] = ps.at(i).shape();
      e["offset"] = weights.size();
      e["count"] = ps.at(i).numel();
      e["checksum"] = git_blob_hash(bytes);
      tensors.push_back(e);
      weights += bytes;
    }
  };
  emit(model.params());
  if (controllers) emit(controllers->params());
  nlohmann::ordered_json manifest;
  manifest["format"] = "dynadepth-checkpoint-v1";
  manifest["dtype"] = "float32-le";
  manifest["config_hash"] = model_config_hash(model.config());
  manifest["tensors"] = tensors;
  text::write_file((dir / "config.json").string(), cfg.dump(2) + "\n");
  text::write_file((dir / "manifest.json").string(), manifest.dump(2) + "\n");
  text::write_file((dir / "weights.bin").string(), weights);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  for (const char* f : {"config.json", "manifest.json", "weights.bin"}) {
    if (!std::filesystem::exists(dir / f)) throw CheckpointError("missing checkpoint file " + (dir / f).string());
  }
  const auto cfg_json = nlohmann::json::parse(text::read_file((dir / "config.json").string()));
  const auto manifest = nlohmann::json::parse(text::read_file((dir / "manifest.json").string()));
  const std::string weights = text::read_file((dir / "weights.bin").string());
  Checkpoint ck{model_config_from_json(cfg_json), {}, std::nullopt};

  ParameterSet backbone, ctl;
  for (const auto& e : manifest.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = e.at("count").get<std::size_t>();
    if (count != shape_numel(shape)) throw CheckpointError("tensor '" + name + "': count does not match shape");
    const std::size_t nbytes = count * 4;
    if (offset + nbytes > weights.size()) {
      throw CheckpointError("checksum mismatch for tensor '" + name + "': weights.bin is truncated");
    }
    const std::string_view bytes(weights.data() + offset, nbytes);
    if (git_blob_hash(bytes) != e.at("checksum").get<std::string>()) {
      throw CheckpointError("checksum mismatch for tensor '" + name + "'");
    }
    Tensor t(shape, detail::decode_f32(bytes));
    (name.rfind("controller.", 0) == 0 ? ctl : backbone).add(name, std::move(t));
  }
  try {
    Model probe(ck.config, backbone);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("shape mismatch vs config: ") + e.what());
  }
  ck.params = std::move(backbone);
  if (cfg_json.contains("controllers")) {
    const auto& c = cfg_json["controllers"];
    try {
      ck.controllers.emplace(ck.config.num_layers, ck.config.hidden_dim,
                             parse_input_mode(c.at("input_mode").get<std::string>()),
                             c.at("control_last").get<bool>(), std::move(ctl));
    } catch (const std::exception& e) {
      throw CheckpointError(std::string("controller tensors: ") + e.what());
    }
  }
  return ck;
}

}  // namespace dynadepth
