#pragma once

#include <array>
#include <functional>
#include <json.hpp>
#include <string>
#include <vector>

#include "granudet/inference.hpp"
#include "granudet/model.hpp"
#include "granudet/pipeline.hpp"
#include "granudet/synth.hpp"
#include "granudet/training.hpp"

namespace granudet {

// Standard file names inside a data directory.
struct DataLayout {
  std::string dir;
  std::string file(const std::string& dataset) const;  // dir/<dataset>.jsonl
  std::string refined() const { return file("refined"); }
  std::string instructions() const { return file("instructions"); }
  std::string pseudo() const { return file("pseudo"); }
  std::string corpus() const { return dir + "/corpus.tsv"; }
};

// Every word a model trained on `dir` may need: dataset texts plus the
// mock LLM responses.
Vocabulary vocabulary_for(const DataLayout& layout);

// Loads the named datasets (<name>.jsonl) with the corpus from refined.jsonl
// when present and detection categories from detection.jsonl.
TrainingData load_training_data(const DataLayout& layout, const std::vector<std::string>& names,
                                ImageCache* images = nullptr);

struct BenchmarkConfig {
  SyntheticShapesSpec synth;
  ModelConfig model;
  std::array<StageConfig, 3> stages{default_stage_config(1), default_stage_config(2), default_stage_config(3)};
  double pseudo_threshold = 0.2;
  DetectOptions detect;
  GenerativeOptions generative;
  std::uint64_t seed = 0;
};

// Desk-scale settings for the synthetic shapes benchmark.
BenchmarkConfig default_benchmark_config(std::uint64_t seed = 0);
nlohmann::json to_json(const BenchmarkConfig& cfg);
// Keys: synth, model, stage1, stage2, stage3, pseudo_threshold, detect,
// generative, seed. Present keys override the defaults.
BenchmarkConfig benchmark_config_from_json(const nlohmann::json& j);

// synth -> annotate -> stage 1 -> pseudolabel -> stage 2 -> stage 3 -> eval,
// all inside `dir`. Returns the report written to dir/report.json.
nlohmann::json run_benchmark(const BenchmarkConfig& cfg, const std::string& dir,
                             const std::function<void(const std::string&)>& log = {});

}  // namespace granudet
