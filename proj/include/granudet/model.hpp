#pragma once

#include <cstdint>
#include <memory>
#include <json.hpp>
#include <string>

#include "granudet/captioner.hpp"
#include "granudet/detector.hpp"
#include "granudet/text_encoder.hpp"

namespace granudet {

struct ModelConfig {
  DetectorConfig detector;
  TextEncoderConfig text;
  CaptionerConfig captioner;
};

// Keys mirror the struct fields. Missing keys keep their defaults; unknown
// keys throw std::invalid_argument.
nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Vocabulary, parameters and the three networks. Parameter names start with
// "text.", "det." or "cap.".
class Model {
 public:
  Model(Vocabulary vocab, const ModelConfig& cfg, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const Vocabulary vocab;
  const ModelConfig config;
  nn::ParameterStore store;
  TextEncoder text;
  Detector detector;
  Captioner captioner;
};

struct Checkpoint {
  std::unique_ptr<Model> model;
  nlohmann::json meta;  // free-form, e.g. {"stage": 1}
};

// Layout: magic line, 8-byte little-endian manifest length, JSON manifest
// (config, vocabulary words, meta, parameter shapes), raw float64 values in
// manifest order.
void save_checkpoint(const std::string& path, const Model& model, const nlohmann::json& meta = nlohmann::json::object());
Checkpoint load_checkpoint(const std::string& path);

}  // namespace granudet
