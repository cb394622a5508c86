#include "granudet/text_encoder.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace granudet {

namespace {

bool is_punct(char c) {
  switch (c) {
    case '|': case ',': case '.': case ':': case ';': case '!': case '?':
    case '\'': case '"': case '(': case ')':
      return true;
    default:
      return false;
  }
}

bool attaches_left(const std::string& piece) {
  return piece == "." || piece == "," || piece == ":" || piece == ";" || piece == "!" || piece == "?";
}

std::string byte_token(int b) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "<0x%02X>", b);
  return buf;
}

}  // namespace

std::vector<std::string> pretokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (is_punct(ch)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary() {
  tokens_ = {"<pad>", "<eos>", "[OBJ]", "[IMG]"};
  for (int b = 0; b < 256; ++b) tokens_.push_back(byte_token(b));
  for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) index_[tokens_[i]] = i;
}

void Vocabulary::add_word(const std::string& w) {
  if (index_.count(w)) return;
  index_[w] = static_cast<int>(tokens_.size());
  tokens_.push_back(w);
}

Vocabulary Vocabulary::build(std::span<const std::string> texts) {
  Vocabulary v;
  for (const auto& t : texts)
    for (const auto& piece : pretokenize(t)) v.add_word(piece);
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write vocabulary: " + path);
  for (const auto& t : tokens_) f << t << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read vocabulary: " + path);
  Vocabulary v;
  std::string line;
  int row = 0;
  while (std::getline(f, line)) {
    if (row < kFirstWord) {
      if (line != v.tokens_[row]) throw std::runtime_error("vocabulary file has unexpected reserved token: " + line);
    } else {
      v.add_word(line);
    }
    ++row;
  }
  if (row < kFirstWord) throw std::runtime_error("vocabulary file is truncated: " + path);
  return v;
}

std::vector<std::string> Vocabulary::words() const {
  return std::vector<std::string>(tokens_.begin() + kFirstWord, tokens_.end());
}

Vocabulary Vocabulary::from_words(std::span<const std::string> words) {
  Vocabulary v;
  for (const auto& w : words) v.add_word(w);
  return v;
}

std::optional<int> Vocabulary::word_id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end() || it->second < kFirstWord) return std::nullopt;
  return it->second;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& piece : pretokenize(text)) {
    if (auto id = word_id(piece)) {
      ids.push_back(*id);
    } else {
      for (unsigned char b : piece) ids.push_back(kByteBase + b);
    }
  }
  return ids;
}

TokenSequence Vocabulary::tokenize(std::string_view text, int max_len) const {
  TokenSequence seq;
  auto ids = encode(text);
  seq.length = std::min(static_cast<int>(ids.size()), max_len);
  seq.ids.assign(max_len, kPad);
  std::copy_n(ids.begin(), seq.length, seq.ids.begin());
  return seq;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> pieces;
  std::string bytes;
  auto flush = [&] {
    if (!bytes.empty()) pieces.push_back(std::move(bytes));
    bytes.clear();
  };
  for (int id : ids) {
    if (id < 0 || id >= size()) continue;
    if (id >= kByteBase && id < kFirstWord) {
      bytes.push_back(static_cast<char>(id - kByteBase));
      continue;
    }
    flush();
    if (id >= kFirstWord) pieces.push_back(tokens_[id]);
  }
  flush();
  std::string out;
  for (const auto& p : pieces) {
    if (!out.empty() && !attaches_left(p)) out.push_back(' ');
    out += p;
  }
  return out;
}

TextEncoder::TextEncoder(nn::ParameterStore& store, const std::string& prefix, const Vocabulary& vocab,
                         const TextEncoderConfig& cfg, Rng& rng)
    : vocab_(&vocab), cfg_(cfg) {
  const int d = cfg.dim;
  std::vector<double> emb(static_cast<std::size_t>(vocab.size()) * d), pos(static_cast<std::size_t>(cfg.max_len) * d);
  for (double& x : emb) x = rng.normal() * 0.5;
  for (double& x : pos) x = rng.normal() * 0.02;
  token_embedding_ = store.add(prefix + "token_embedding", vocab.size(), d, emb);
  position_embedding_ = store.add(prefix + "position_embedding", cfg.max_len, d, pos);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = prefix + "layer" + std::to_string(l) + ".";
    layers_.push_back(Layer{nn::LayerNorm(store, p + "ln1", d), nn::LayerNorm(store, p + "ln2", d),
                            nn::Linear(store, p + "q", d, d, rng), nn::Linear(store, p + "k", d, d, rng),
                            nn::Linear(store, p + "v", d, d, rng), nn::Linear(store, p + "out", d, d, rng),
                            nn::Mlp(store, p + "ffn", {d, cfg.ffn, d}, rng)});
  }
  final_ln_ = nn::LayerNorm(store, prefix + "final_ln", d);
  proj_ = nn::Linear(store, prefix + "proj", d, d, rng);
}

nn::Tensor TextEncoder::encode_one(std::string_view text) const {
  auto seq = vocab_->tokenize(text, cfg_.max_len);
  std::vector<int> ids(seq.ids.begin(), seq.ids.begin() + seq.length);
  if (ids.empty()) ids.push_back(Vocabulary::kPad);
  std::vector<int> positions(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i);
  nn::Tensor h = nn::add(nn::gather_rows(token_embedding_, ids), nn::gather_rows(position_embedding_, positions));
  for (const auto& layer : layers_) {
    nn::Tensor x = layer.ln1(h);
    h = nn::add(h, layer.out(nn::multihead_attention(layer.q(x), layer.k(x), layer.v(x), cfg_.heads)));
    h = nn::add(h, layer.ffn(layer.ln2(h)));
  }
  h = final_ln_(h);
  nn::Tensor pooled = nn::scale(nn::matmul(nn::Tensor(1, h.rows(), 1.0), h), 1.0 / h.rows());
  return nn::l2_normalize_rows(proj_(pooled));
}

nn::Tensor TextEncoder::encode(std::span<const std::string> texts) const {
  if (texts.empty()) throw std::invalid_argument("encode: no texts");
  std::vector<nn::Tensor> rows;
  rows.reserve(texts.size());
  for (const auto& t : texts) rows.push_back(encode_one(t));
  return nn::concat_rows(rows);
}

nn::Tensor similarity(const nn::Tensor& query_features, const nn::Tensor& concept_embeddings, const nn::Tensor& scale) {
  return nn::mul_scalar(nn::dot_rows(nn::l2_normalize_rows(query_features), concept_embeddings), scale);
}

}  // namespace granudet
