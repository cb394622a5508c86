#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "granudet/geometry.hpp"
#include "granudet/nn/layers.hpp"

namespace granudet {

struct DetectorConfig {
  int dim = 64;
  int heads = 4;
  int points = 4;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int num_queries = 20;
  int ffn = 128;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double w_align = 1.0;
  double w_box = 5.0;
  double w_iou = 2.0;
};

// Per-row sine/cosine features of every column of `coords`, `feats` values
// per column.
nn::Tensor sine_embedding(const nn::Tensor& coords, int feats);

struct FeatureMap {
  nn::Tensor tokens;  // (H*W) x C
  int height = 0;
  int width = 0;
};

// Strided conv stack producing maps at strides 8, 16 and 32.
class Backbone {
 public:
  Backbone() = default;
  Backbone(nn::ParameterStore& store, const std::string& prefix, int dim, Rng& rng);
  std::vector<FeatureMap> operator()(const nn::Tensor& image, int height, int width) const;

 private:
  struct Conv {
    nn::Tensor w, b;
    int in = 0, out = 0, stride = 1;
  };
  std::vector<Conv> stem_;    // strides 2, 4, 8 and a stride-1 refinement
  std::vector<Conv> levels_;  // strides 16, 32
};

// Multi-scale deformable attention: value projection, sampling offsets and
// per-head softmax weights predicted from the query, output projection.
class DeformableAttention {
 public:
  DeformableAttention() = default;
  DeformableAttention(nn::ParameterStore& store, const std::string& prefix, int dim, int heads, int levels,
                      int points, Rng& rng);
  nn::Tensor operator()(const nn::Tensor& query, const nn::Tensor& reference, const nn::Tensor& value_input,
                        std::span<const nn::LevelShape> levels) const;

 private:
  int heads_ = 0, points_ = 0;
  nn::Linear value_, offsets_, weights_, out_;
};

// exp(log_scale) * cos(proj(x), concept) + bias.
class AlignmentHead {
 public:
  AlignmentHead() = default;
  AlignmentHead(nn::ParameterStore& store, const std::string& prefix, int dim, Rng& rng);
  nn::Tensor operator()(const nn::Tensor& features, const nn::Tensor& concepts) const;

 private:
  nn::Linear proj_;
  nn::Tensor log_scale_, bias_;
};

struct PixelFeatures {
  std::vector<nn::LevelShape> levels;
  nn::Tensor memory;     // T x D, pixel-encoder output
  nn::Tensor reference;  // T x 2 token centres, constant
  nn::Tensor features;   // T x D, proposal features
  nn::Tensor proposals;  // T x 4 centre-form boxes
  int tokens() const { return memory.rows(); }
};

struct QuerySelection {
  std::vector<int> tokens;     // best first
  std::vector<double> scores;  // max-over-concepts encoder logit per token
  nn::Tensor boxes;            // K x 4 positional boxes, detached
};

struct DecoderOutput {
  std::vector<nn::Tensor> boxes;   // per layer, K x 4 centre form
  std::vector<nn::Tensor> hidden;  // per layer, K x D
};

struct DetectionOutput {
  std::vector<nn::Tensor> boxes;   // per layer, K x 4 centre form
  std::vector<nn::Tensor> logits;  // per layer, K x C
  nn::Tensor hidden;               // final-layer query features
  nn::Tensor encoder_boxes;        // selected proposals, K x 4
  nn::Tensor encoder_logits;       // K x C
  QuerySelection selection;
};

// Row-wise maximum.
std::vector<double> max_over_concepts(const nn::Tensor& logits);
// Indices of the k largest scores, descending, ties to the lower index.
std::vector<int> select_topk_queries(std::span<const double> scores, int k);

class Detector {
 public:
  Detector() = default;
  Detector(nn::ParameterStore& store, const std::string& prefix, const DetectorConfig& cfg, Rng& rng);

  const DetectorConfig& config() const { return cfg_; }

  std::vector<FeatureMap> backbone(const nn::Tensor& image, int height, int width) const;
  PixelFeatures encode(const nn::Tensor& image, int height, int width) const;
  nn::Tensor encoder_logits(const PixelFeatures& pf, const nn::Tensor& concepts) const;
  QuerySelection select(const PixelFeatures& pf, std::span<const double> token_scores) const;
  DecoderOutput decode(const PixelFeatures& pf, const QuerySelection& sel) const;
  nn::Tensor align(const nn::Tensor& hidden, const nn::Tensor& concepts) const;

  DetectionOutput forward(const nn::Tensor& image, int height, int width, const nn::Tensor& concepts) const;
  DetectionOutput forward(const PixelFeatures& pf, const nn::Tensor& concepts) const;

 private:
  struct EncoderLayer {
    DeformableAttention attn;
    nn::LayerNorm ln1, ln2;
    nn::Mlp ffn;
  };
  struct DecoderLayer {
    nn::Linear q, k, v, out;
    DeformableAttention cross;
    nn::LayerNorm ln1, ln2, ln3;
    nn::Mlp ffn;
    nn::Mlp box;
  };
  DetectorConfig cfg_;
  Backbone backbone_;
  std::vector<nn::Linear> input_proj_;
  std::vector<nn::LayerNorm> input_norm_;
  nn::Tensor level_embedding_;
  std::vector<EncoderLayer> encoder_;
  nn::Linear enc_proj_;
  nn::LayerNorm enc_norm_;
  AlignmentHead enc_align_;
  nn::Mlp enc_box_;
  nn::Tensor query_content_;
  nn::Mlp query_pos_;
  std::vector<DecoderLayer> decoder_;
  AlignmentHead align_;
};

struct MatchWeights {
  double align = 1.0;
  double box = 5.0;
  double iou = 2.0;
  double alpha = 0.25;
  double gamma = 2.0;
};

// Matching cost, row-major G x K.
std::vector<double> matching_cost(std::span<const double> pred_boxes, std::span<const double> pred_logits,
                                  int num_concepts, std::span<const Box> gt_boxes,
                                  const std::vector<std::vector<int>>& gt_concepts, const MatchWeights& w);

// Minimum-cost assignment of every row to a distinct column (rows <= cols).
std::vector<int> solve_assignment(std::span<const double> cost, int rows, int cols);

struct Match {
  int query = 0;
  int target = 0;
};

struct Assignment {
  std::vector<Match> matches;  // ordered by target
  double total_cost = 0.0;
};

// pred_boxes K x 4 centre form, pred_logits K x C. Throws std::length_error
// when there are more targets than queries.
Assignment hungarian_match(const nn::Tensor& pred_boxes, const nn::Tensor& pred_logits, std::span<const Box> gt_boxes,
                           const std::vector<std::vector<int>>& gt_concepts, const MatchWeights& w);

// Sigmoid focal loss over the grid, normalised by max(1, #positives).
nn::Tensor contrastive_focal_loss(const nn::Tensor& logits, std::span<const double> positive_map, double alpha,
                                  double gamma);

struct DetectionTargets {
  std::vector<Box> boxes;
  std::vector<std::vector<int>> concepts;  // positive concept columns per box
};

struct DetectionLoss {
  nn::Tensor total;
  double align = 0.0;
  double box = 0.0;
  double iou = 0.0;
  std::vector<Match> final_matches;  // last decoder layer
};

// Matched loss for one set of predictions.
DetectionLoss matched_loss(const nn::Tensor& boxes, const nn::Tensor& logits, const DetectionTargets& targets,
                           const DetectorConfig& cfg);
// Sum of matched_loss over decoder layers and the encoder proposals.
DetectionLoss detection_loss(const DetectionOutput& out, const DetectionTargets& targets, const DetectorConfig& cfg);

MatchWeights match_weights(const DetectorConfig& cfg);

}  // namespace granudet
