#include "granudet/captioner.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace granudet {

nn::AttentionMask build_multimodal_causal_mask(int n_queries, int n_text) {
  nn::AttentionMask m;
  m.rows = m.cols = n_queries + n_text;
  m.allowed.assign(static_cast<std::size_t>(m.rows) * m.cols, 0);
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) {
      const bool allowed = i < n_queries ? j < n_queries : (j < n_queries || j <= i);
      m.allowed[static_cast<std::size_t>(i) * m.cols + j] = allowed ? 1 : 0;
    }
  return m;
}

std::vector<int> image_query_tokens(int token_count, int n) {
  if (token_count < 1 || n < 1) throw std::invalid_argument("image_query_tokens: empty");
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i)
    idx[i] = n == 1 ? 0 : static_cast<int>(std::lround(static_cast<double>(i) * (token_count - 1) / (n - 1)));
  return idx;
}

Captioner::Captioner(nn::ParameterStore& store, const std::string& prefix, const Vocabulary& vocab,
                     const CaptionerConfig& cfg, Rng& rng)
    : vocab_(&vocab), cfg_(cfg) {
  const int d = cfg.dim;
  auto gaussian = [&](int r, int c, double s) {
    std::vector<double> v(static_cast<std::size_t>(r) * c);
    for (double& x : v) x = rng.normal() * s;
    return v;
  };
  token_embedding_ = store.add(prefix + "token_embedding", vocab.size(), d, gaussian(vocab.size(), d, 0.5));
  position_embedding_ = store.add(prefix + "position_embedding", cfg.max_len, d, gaussian(cfg.max_len, d, 0.1));
  image_queries_ = store.add(prefix + "image_queries", cfg.image_queries, d, gaussian(cfg.image_queries, d, 0.5));
  embed_norm_ = nn::LayerNorm(store, prefix + "embed_norm", d);
  obj_proj_ = nn::Linear(store, prefix + "obj_proj", d, d, rng);
  obj_box_ = nn::Mlp(store, prefix + "obj_box", {2 * d, d, d}, rng);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = prefix + "layer" + std::to_string(l) + ".";
    layers_.push_back({nn::Linear(store, p + "q", d, d, rng), nn::Linear(store, p + "k", d, d, rng),
                       nn::Linear(store, p + "v", d, d, rng), nn::Linear(store, p + "out", d, d, rng),
                       DeformableAttention(store, p + "cross.", d, cfg.heads, 3, cfg.points, rng),
                       nn::LayerNorm(store, p + "ln1", d), nn::LayerNorm(store, p + "ln2", d),
                       nn::LayerNorm(store, p + "ln3", d), nn::Mlp(store, p + "ffn", {d, cfg.ffn, d}, rng)});
  }
  lm_head_ = nn::Linear(store, prefix + "lm_head", d, vocab.size(), rng);
}

nn::Tensor Captioner::object_queries(const nn::Tensor& decoder_hidden, const nn::Tensor& boxes) const {
  return nn::add(obj_proj_(decoder_hidden), obj_box_(sine_embedding(boxes.detach(), cfg_.dim / 2)));
}

nn::Tensor Captioner::image_references(const PixelFeatures& pf) const {
  return nn::gather_rows(pf.reference, image_query_tokens(pf.tokens(), cfg_.image_queries));
}

CaptionerTrace Captioner::forward(const nn::Tensor& visual, const nn::Tensor& references, const PixelFeatures& pf,
                                  std::span<const int> ids) const {
  const int n = visual.rows(), t = static_cast<int>(ids.size());
  if (t < 1 || t > cfg_.max_len) throw std::invalid_argument("captioner: text length out of range");
  if (references.rows() != n) throw std::invalid_argument("captioner: one reference per query");
  std::vector<int> positions(t);
  for (int i = 0; i < t; ++i) positions[i] = i;
  const nn::Tensor text = embed_norm_(
      nn::add(nn::gather_rows(token_embedding_, ids), nn::gather_rows(position_embedding_, positions)));
  const nn::Tensor parts[] = {visual, text};
  nn::Tensor x = nn::concat_rows(parts);
  auto mask = std::make_shared<const nn::AttentionMask>(build_multimodal_causal_mask(n, t));
  for (const auto& layer : layers_) {
    x = layer.ln1(nn::add(x, layer.out(nn::multihead_attention(layer.q(x), layer.k(x), layer.v(x), cfg_.heads, mask))));
    nn::Tensor vis = nn::slice_rows(x, 0, n);
    vis = layer.ln2(nn::add(vis, layer.cross(vis, references, pf.memory, pf.levels)));
    const nn::Tensor joined[] = {vis, nn::slice_rows(x, n, n + t)};
    x = nn::concat_rows(joined);
    x = layer.ln3(nn::add(x, layer.ffn(x)));
  }
  return {nn::slice_rows(x, 0, n), lm_head_(nn::slice_rows(x, n, n + t))};
}

std::pair<std::vector<int>, std::vector<int>> teacher_forcing_ids(const Vocabulary& vocab, int task,
                                                                  const std::string& text, int max_len) {
  auto target = vocab.encode(text);
  if (static_cast<int>(target.size()) > max_len - 1) target.resize(max_len - 1);
  target.push_back(Vocabulary::kEos);
  std::vector<int> input{task};
  input.insert(input.end(), target.begin(), target.end() - 1);
  return {input, target};
}

nn::Tensor Captioner::lm_loss(const nn::Tensor& visual, const nn::Tensor& references, const PixelFeatures& pf,
                              int task, const std::string& target) const {
  const auto [input, tgt] = teacher_forcing_ids(*vocab_, task, target, cfg_.max_len);
  return nn::cross_entropy(forward(visual, references, pf, input).logits, tgt);
}

GeneratedLabel Captioner::generate(const nn::Tensor& visual, const nn::Tensor& references, const PixelFeatures& pf,
                                   int task, int max_len) const {
  nn::NoGradGuard ng;
  max_len = std::min(max_len, cfg_.max_len);
  GeneratedLabel g;
  std::vector<int> ids{task};
  for (int step = 0; step < max_len; ++step) {
    const auto trace = forward(visual, references, pf, ids);
    const auto row = trace.logits.values().subspan(static_cast<std::size_t>(trace.logits.rows() - 1) * trace.logits.cols(),
                                                   trace.logits.cols());
    const auto lp = nn::log_softmax_row(row);
    const int best = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    g.logprob += lp[best];
    if (best == Vocabulary::kEos) break;
    g.tokens.push_back(best);
    ids.push_back(best);
  }
  g.text = vocab_->decode(g.tokens);
  g.triplet = parse_generated_label(g.text);
  return g;
}

nn::Tensor box_references(const nn::Tensor& boxes) { return boxes.detach(); }

CaptionLoss object_caption_loss(const Captioner& cap, const PixelFeatures& pf, const DetectionOutput& det,
                                std::span<const Match> matches, std::span<const std::string> targets) {
  CaptionLoss out;
  out.loss = nn::Tensor::scalar(0.0);
  if (matches.empty()) return out;
  const nn::Tensor refs = box_references(det.boxes.back());
  std::vector<nn::Tensor> losses;
  for (const auto& m : matches) {
    const int q[] = {m.query};
    const nn::Tensor box = nn::gather_rows(refs, q);
    const nn::Tensor visual = cap.object_queries(nn::gather_rows(det.hidden, q), box);
    losses.push_back(cap.lm_loss(visual, box, pf, Vocabulary::kObj, targets[m.target]));
  }
  nn::Tensor total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) total = nn::add(total, losses[i]);
  out.count = static_cast<int>(losses.size());
  out.loss = nn::scale(total, 1.0 / out.count);
  return out;
}

nn::Tensor image_caption_loss(const Captioner& cap, const PixelFeatures& pf, const std::string& caption) {
  return cap.lm_loss(cap.image_queries(), cap.image_references(pf), pf, Vocabulary::kImg, caption);
}

double recalibrate_objectness(const Detector& det, const nn::Tensor& query_feature, const GeneratedLabel& label,
                              const TextEncoder& text) {
  if (label.malformed()) return 0.0;
  nn::NoGradGuard ng;
  const std::string texts[] = {label.triplet->phrase, label.triplet->category};
  const auto logits = det.align(query_feature, text.encode(texts));
  return recalibrated_score(logits(0, 0), logits(0, 1));
}

}  // namespace granudet
