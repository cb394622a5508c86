#pragma once

#include <cstdint>
#include <functional>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "granudet/concepts.hpp"
#include "granudet/dataset.hpp"
#include "granudet/model.hpp"
#include "granudet/rng.hpp"

namespace granudet {

struct StageConfig {
  int stage = 1;
  std::vector<std::string> datasets;  // dataset names used by this stage
  int min_size = 64;                  // input side, sampled per batch in steps of 32
  int max_size = 64;
  bool jitter = false;
  double scale_min = 0.1;
  double scale_max = 2.0;
  int epochs = 1;
  std::int64_t max_steps = 0;  // 0 = no cap
  int batch_size = 8;
  double lr = 2.8e-4;
  double text_lr_mult = 0.1;
  double weight_decay = 0.05;
  std::int64_t warmup = 1000;
  double grad_clip = 0.1;
  std::vector<std::string> frozen;  // parameter-name prefixes
  bool loss_det = true;
  bool loss_lm = false;
  int negatives = 64;  // per-sample negative concepts before pooling
  int shards = 4;      // virtual shards whose negative pools are merged
  std::uint64_t seed = 0;
};

// Default schedule for stage 1, 2 or 3 with desk-scale sizes.
StageConfig default_stage_config(int stage);
// Throws std::invalid_argument when the stage invariants do not hold.
void validate(const StageConfig& cfg);
nlohmann::json to_json(const StageConfig& cfg);
// Starts from default_stage_config(j["stage"]) and overrides present keys.
StageConfig stage_config_from_json(const nlohmann::json& j);

struct SourceBatch {
  std::size_t dataset = 0;  // index into the dataset list
  SourceKind source = SourceKind::detection;
  std::vector<std::size_t> samples;
};

// Each dataset is shuffled and cut into batches; batches from all datasets are
// then shuffled together. Every batch holds one dataset only.
std::vector<SourceBatch> make_batches(std::span<const Dataset> datasets, int batch_size, std::uint64_t seed);

struct AugmentedSample {
  Image image;
  std::vector<ObjectAnnotation> objects;
};

// Scales by `scale`, then places the scaled image at (-offset_x, -offset_y)
// on a target x target canvas (crop when positive, pad when negative). Boxes
// follow and are clipped; boxes left with zero area are dropped.
AugmentedSample jitter_with(const Image& image, std::span<const ObjectAnnotation> objects, double scale, int offset_x,
                            int offset_y, int target);
// Random scale in [scale_min, scale_max] and random crop/pad offset.
AugmentedSample large_scale_jitter(const Image& image, std::span<const ObjectAnnotation> objects, double scale_min,
                                   double scale_max, int target, Rng& rng);

// Round-robin over category buckets (sorted by name); each pick takes the
// next unused sample of the bucket in seeded order.
std::vector<std::size_t> balanced_sample(std::span<const SampleRecord> pool, std::size_t n, std::uint64_t seed);

// Everything a stage draws from.
struct TrainingData {
  std::vector<Dataset> datasets;
  NounCorpus corpus;                        // negatives for grounding and image-text data
  std::vector<std::string> det_categories;  // negatives for detection data
  ImageCache* images = nullptr;
};

std::vector<std::string> dataset_categories(const Dataset& d);

struct PreparedSample {
  Image image;
  std::vector<std::string> concepts;
  DetectionTargets targets;
  std::vector<std::string> object_texts;  // "phrase | category | parent" per target
  std::string caption;
  SourceKind source = SourceKind::detection;
};

// Builds images, concept lists (positives then the batch's merged negative
// pool) and targets for a batch. Deterministic in `seed`.
std::vector<PreparedSample> prepare_batch(const TrainingData& data, const SourceBatch& batch, const StageConfig& cfg,
                                          int size, std::uint64_t seed);

struct BatchLoss {
  nn::Tensor total;
  double det = 0.0;
  double lm = 0.0;
  int lm_terms = 0;
};

// Mean over the batch of the active loss terms. Captioning terms use
// image-text samples only.
BatchLoss batch_loss(Model& model, std::span<const PreparedSample> batch, const StageConfig& cfg);

struct StepLog {
  int stage = 0;
  std::int64_t step = 0;
  double total = 0.0;
  double det = 0.0;
  double lm = 0.0;
  double lr = 0.0;
};
nlohmann::json to_json(const StepLog& s);

struct StageResult {
  std::vector<StepLog> log;
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
  double seconds = 0.0;
};

// Trains `model` in place. `on_step` sees every log entry as it is produced.
StageResult run_stage(Model& model, const StageConfig& cfg, const TrainingData& data,
                      const std::function<void(const StepLog&)>& on_step = {});

}  // namespace granudet
