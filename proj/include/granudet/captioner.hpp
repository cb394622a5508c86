#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "granudet/concepts.hpp"
#include "granudet/detector.hpp"
#include "granudet/text_encoder.hpp"

namespace granudet {

struct CaptionerConfig {
  int dim = 64;
  int heads = 4;
  int layers = 2;
  int ffn = 128;
  int points = 4;
  int max_len = 32;
  int image_queries = 32;
};

// Sequence layout is [queries | task token | text]. The task token counts as
// text position 0. n_text includes the task token.
nn::AttentionMask build_multimodal_causal_mask(int n_queries, int n_text);

// Token indices round(i * (T - 1) / (n - 1)) for i = 0..n-1.
std::vector<int> image_query_tokens(int token_count, int n);

struct CaptionerTrace {
  nn::Tensor query_hidden;  // n_queries x D
  nn::Tensor logits;        // n_text x vocab
};

struct GeneratedLabel {
  std::vector<int> tokens;  // without the task token and EOS
  std::string text;
  std::optional<EntityTriplet> triplet;
  double logprob = 0.0;
  double objectness = 0.0;
  bool malformed() const { return !triplet.has_value(); }
};

class Captioner {
 public:
  Captioner() = default;
  Captioner(nn::ParameterStore& store, const std::string& prefix, const Vocabulary& vocab, const CaptionerConfig& cfg,
            Rng& rng);

  const CaptionerConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return *vocab_; }

  // visual: n x D, references: n x 2 points or n x 4 boxes (centre form),
  // ids: task token then text tokens.
  CaptionerTrace forward(const nn::Tensor& visual, const nn::Tensor& references, const PixelFeatures& pf,
                         std::span<const int> ids) const;

  // Object-mode visual input: projected decoder features plus an embedding
  // of the query's final box (detached).
  nn::Tensor object_queries(const nn::Tensor& decoder_hidden, const nn::Tensor& boxes) const;
  const nn::Tensor& image_queries() const { return image_queries_; }
  nn::Tensor image_references(const PixelFeatures& pf) const;

  // Teacher-forced cross-entropy, averaged over target tokens (text + EOS).
  nn::Tensor lm_loss(const nn::Tensor& visual, const nn::Tensor& references, const PixelFeatures& pf, int task,
                     const std::string& target) const;

  // Greedy decoding until EOS or max_len generated tokens.
  GeneratedLabel generate(const nn::Tensor& visual, const nn::Tensor& references, const PixelFeatures& pf, int task,
                          int max_len) const;

 private:
  struct Layer {
    nn::Linear q, k, v, out;
    DeformableAttention cross;
    nn::LayerNorm ln1, ln2, ln3;
    nn::Mlp ffn;
  };
  const Vocabulary* vocab_ = nullptr;
  CaptionerConfig cfg_;
  nn::Tensor token_embedding_, position_embedding_, image_queries_;
  nn::LayerNorm embed_norm_;
  nn::Linear obj_proj_;
  nn::Mlp obj_box_;
  std::vector<Layer> layers_;
  nn::Linear lm_head_;
};

// Input/target ids for teacher forcing: target = tokens(text)[: max_len - 1]
// + EOS, input = task + target[:-1].
std::pair<std::vector<int>, std::vector<int>> teacher_forcing_ids(const Vocabulary& vocab, int task,
                                                                  const std::string& text, int max_len);

// Deformable reference for object queries: their final boxes, detached.
nn::Tensor box_references(const nn::Tensor& boxes);

struct CaptionLoss {
  nn::Tensor loss;  // 1x1, zero when skipped
  int count = 0;
  bool skipped() const { return count == 0; }
};

// LM loss on matched queries only, averaged over tokens then queries.
// targets[m.target] is the ground-truth string for match m.
CaptionLoss object_caption_loss(const Captioner& cap, const PixelFeatures& pf, const DetectionOutput& det,
                                std::span<const Match> matches, std::span<const std::string> targets);
// Image-level LM loss with the 32 learned queries and the IMG token.
nn::Tensor image_caption_loss(const Captioner& cap, const PixelFeatures& pf, const std::string& caption);

inline double recalibrated_score(double phrase_logit, double category_logit) {
  return 1.0 / (1.0 + std::exp(-std::max(phrase_logit, category_logit)));
}

// sigmoid(max(align(query, phrase), align(query, category))); 0 for
// malformed labels.
double recalibrate_objectness(const Detector& det, const nn::Tensor& query_feature, const GeneratedLabel& label,
                              const TextEncoder& text);

}  // namespace granudet
