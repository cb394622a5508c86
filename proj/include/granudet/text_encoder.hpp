#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "granudet/nn/layers.hpp"

namespace granudet {

// Lowercases and splits on whitespace; punctuation characters become
// separate pieces.
std::vector<std::string> pretokenize(std::string_view text);

struct TokenSequence {
  std::vector<int> ids;  // always max_len long, padded with Vocabulary::kPad
  int length = 0;        // number of real tokens
};

// Word-level vocabulary with byte fallback. Id layout:
//   0 <pad>, 1 <eos>, 2 [OBJ], 3 [IMG], 4..259 byte tokens, then words.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kEos = 1;
  static constexpr int kObj = 2;
  static constexpr int kImg = 3;
  static constexpr int kByteBase = 4;
  static constexpr int kFirstWord = kByteBase + 256;

  Vocabulary();
  // Adds every word piece of `texts` in first-seen order.
  static Vocabulary build(std::span<const std::string> texts);

  // One token per line, line i holds id i.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);
  // Word tokens only, in id order.
  std::vector<std::string> words() const;
  static Vocabulary from_words(std::span<const std::string> words);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(id); }
  std::optional<int> word_id(const std::string& word) const;

  // Untruncated ids, no padding, no specials.
  std::vector<int> encode(std::string_view text) const;
  TokenSequence tokenize(std::string_view text, int max_len) const;
  // Skips specials; byte runs are reassembled into words.
  std::string decode(std::span<const int> ids) const;

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void add_word(const std::string& w);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct TextEncoderConfig {
  int dim = 64;
  int layers = 2;
  int heads = 4;
  int ffn = 128;
  int max_len = 16;
};

// Concept text -> unit-norm embedding. Each text is encoded as its own
// sequence, so a row never depends on which other texts share the batch.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(nn::ParameterStore& store, const std::string& prefix, const Vocabulary& vocab,
              const TextEncoderConfig& cfg, Rng& rng);

  nn::Tensor encode(std::span<const std::string> texts) const;
  nn::Tensor encode_one(std::string_view text) const;
  const TextEncoderConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return *vocab_; }

 private:
  struct Layer {
    nn::LayerNorm ln1, ln2;
    nn::Linear q, k, v, out;
    nn::Mlp ffn;
  };
  const Vocabulary* vocab_ = nullptr;
  TextEncoderConfig cfg_;
  nn::Tensor token_embedding_, position_embedding_;
  std::vector<Layer> layers_;
  nn::LayerNorm final_ln_;
  nn::Linear proj_;
};

// scale * <normalize(query_i), concept_j>; `scale` is a positive 1x1 tensor.
nn::Tensor similarity(const nn::Tensor& query_features, const nn::Tensor& concept_embeddings, const nn::Tensor& scale);

}  // namespace granudet
