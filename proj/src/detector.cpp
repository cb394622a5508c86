#include "granudet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "granudet/text_encoder.hpp"

namespace granudet {

namespace {

std::vector<double> he_normal(int fan_in, int fan_out, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(fan_in) * fan_out);
  const double s = std::sqrt(2.0 / fan_in);
  for (double& x : w) x = rng.normal() * s;
  return w;
}

double focal_pos_cost(double p, double alpha, double gamma) {
  return alpha * std::pow(1.0 - p, gamma) * -std::log(p + 1e-8);
}

double focal_neg_cost(double p, double alpha, double gamma) {
  return (1.0 - alpha) * std::pow(p, gamma) * -std::log(1.0 - p + 1e-8);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

nn::Tensor sine_embedding(const nn::Tensor& coords, int feats) {
  if (feats % 2 != 0) throw std::invalid_argument("sine_embedding: feats must be even");
  const int n = coords.rows(), m = coords.cols();
  std::vector<double> out(static_cast<std::size_t>(n) * m * feats);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < m; ++c) {
      const double v = coords(r, c) * 2.0 * M_PI;
      for (int i = 0; i < feats / 2; ++i) {
        const double t = v / std::pow(10000.0, 2.0 * i / feats);
        const std::size_t o = (static_cast<std::size_t>(r) * m + c) * feats + 2 * i;
        out[o] = std::sin(t);
        out[o + 1] = std::cos(t);
      }
    }
  return nn::Tensor(n, m * feats, std::move(out));
}

Backbone::Backbone(nn::ParameterStore& store, const std::string& prefix, int dim, Rng& rng) {
  auto conv = [&](const std::string& name, int in, int out, int stride) {
    Conv c;
    c.in = in;
    c.out = out;
    c.stride = stride;
    c.w = store.add(prefix + name + ".w", 9 * in, out, he_normal(9 * in, out, rng));
    c.b = store.add(prefix + name + ".b", 1, out, std::vector<double>(out, 0.0));
    return c;
  };
  stem_ = {conv("stem0", 3, 16, 2), conv("stem1", 16, 32, 2), conv("stem2", 32, dim, 2), conv("stem3", dim, dim, 1)};
  levels_ = {conv("level1", dim, dim, 2), conv("level2", dim, dim, 2)};
}

std::vector<FeatureMap> Backbone::operator()(const nn::Tensor& image, int height, int width) const {
  if (image.rows() != height * width || image.cols() != 3) throw std::invalid_argument("backbone: image shape");
  nn::Tensor x = image;
  int h = height, w = width;
  auto apply = [&](const Conv& c) {
    nn::ConvShape s{h, w, c.in, 3, c.stride, 1};
    x = nn::relu(nn::conv2d(x, c.w, c.b, s));
    h = s.out_height();
    w = s.out_width();
  };
  for (const auto& c : stem_) apply(c);
  std::vector<FeatureMap> maps{{x, h, w}};
  for (const auto& c : levels_) {
    apply(c);
    maps.push_back({x, h, w});
  }
  return maps;
}

DeformableAttention::DeformableAttention(nn::ParameterStore& store, const std::string& prefix, int dim, int heads,
                                         int levels, int points, Rng& rng)
    : heads_(heads), points_(points) {
  value_ = nn::Linear(store, prefix + "value", dim, dim, rng);
  offsets_ = nn::Linear(store, prefix + "offsets", dim, heads * levels * points * 2, rng, true);
  weights_ = nn::Linear(store, prefix + "weights", dim, heads * levels * points, rng, true);
  out_ = nn::Linear(store, prefix + "out", dim, dim, rng);
  // Initial sampling pattern: each head looks along its own direction, with
  // points at increasing distance.
  nn::Tensor b = offsets_.bias();
  auto& bv = b.mutable_values();
  for (int h = 0; h < heads; ++h) {
    const double theta = 2.0 * M_PI * h / heads;
    double gx = std::cos(theta), gy = std::sin(theta);
    const double m = std::max(std::fabs(gx), std::fabs(gy));
    gx /= m;
    gy /= m;
    for (int l = 0; l < levels; ++l)
      for (int p = 0; p < points; ++p) {
        const std::size_t o = ((static_cast<std::size_t>(h) * levels + l) * points + p) * 2;
        bv[o] = gx * (p + 1);
        bv[o + 1] = gy * (p + 1);
      }
  }
}

nn::Tensor DeformableAttention::operator()(const nn::Tensor& query, const nn::Tensor& reference,
                                           const nn::Tensor& value_input,
                                           std::span<const nn::LevelShape> levels) const {
  const nn::Tensor sampled =
      nn::deformable_sample(value_(value_input), levels, reference, offsets_(query), weights_(query), heads_, points_);
  return out_(sampled);
}

AlignmentHead::AlignmentHead(nn::ParameterStore& store, const std::string& prefix, int dim, Rng& rng) {
  proj_ = nn::Linear(store, prefix + "proj", dim, dim, rng);
  log_scale_ = store.add(prefix + "log_scale", 1, 1, {std::log(1.0 / 0.07)});
  bias_ = store.add(prefix + "bias", 1, 1, {-std::log((1.0 - 0.01) / 0.01)});
}

nn::Tensor AlignmentHead::operator()(const nn::Tensor& features, const nn::Tensor& concepts) const {
  return nn::add_scalar(similarity(proj_(features), concepts, nn::exp(log_scale_)), bias_);
}

std::vector<double> max_over_concepts(const nn::Tensor& logits) {
  std::vector<double> out(logits.rows(), -std::numeric_limits<double>::infinity());
  for (int r = 0; r < logits.rows(); ++r)
    for (int c = 0; c < logits.cols(); ++c) out[r] = std::max(out[r], logits(r, c));
  return out;
}

std::vector<int> select_topk_queries(std::span<const double> scores, int k) {
  if (k < 0 || k > static_cast<int>(scores.size())) throw std::invalid_argument("select_topk_queries: k out of range");
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  order.resize(k);
  return order;
}

Detector::Detector(nn::ParameterStore& store, const std::string& prefix, const DetectorConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  const int d = cfg.dim;
  constexpr int kLevels = 3;
  backbone_ = Backbone(store, prefix + "backbone.", d, rng);
  for (int l = 0; l < kLevels; ++l) {
    input_proj_.emplace_back(store, prefix + "input_proj" + std::to_string(l), d, d, rng);
    input_norm_.emplace_back(store, prefix + "input_norm" + std::to_string(l), d);
  }
  std::vector<double> lv(kLevels * d);
  for (double& x : lv) x = rng.normal() * 0.1;
  level_embedding_ = store.add(prefix + "level_embedding", kLevels, d, lv);
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    const std::string p = prefix + "encoder" + std::to_string(l) + ".";
    encoder_.push_back({DeformableAttention(store, p + "attn.", d, cfg.heads, kLevels, cfg.points, rng),
                        nn::LayerNorm(store, p + "ln1", d), nn::LayerNorm(store, p + "ln2", d),
                        nn::Mlp(store, p + "ffn", {d, cfg.ffn, d}, rng)});
  }
  enc_proj_ = nn::Linear(store, prefix + "enc_proj", d, d, rng);
  enc_norm_ = nn::LayerNorm(store, prefix + "enc_norm", d);
  enc_align_ = AlignmentHead(store, prefix + "enc_align.", d, rng);
  enc_box_ = nn::Mlp(store, prefix + "enc_box", {d, d, 4}, rng, true);
  std::vector<double> qc(static_cast<std::size_t>(cfg.num_queries) * d);
  for (double& x : qc) x = rng.normal() * 0.1;
  query_content_ = store.add(prefix + "query_content", cfg.num_queries, d, qc);
  query_pos_ = nn::Mlp(store, prefix + "query_pos", {2 * d, d, d}, rng);
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    const std::string p = prefix + "decoder" + std::to_string(l) + ".";
    decoder_.push_back({nn::Linear(store, p + "q", d, d, rng), nn::Linear(store, p + "k", d, d, rng),
                        nn::Linear(store, p + "v", d, d, rng), nn::Linear(store, p + "out", d, d, rng),
                        DeformableAttention(store, p + "cross.", d, cfg.heads, kLevels, cfg.points, rng),
                        nn::LayerNorm(store, p + "ln1", d), nn::LayerNorm(store, p + "ln2", d),
                        nn::LayerNorm(store, p + "ln3", d), nn::Mlp(store, p + "ffn", {d, cfg.ffn, d}, rng),
                        nn::Mlp(store, p + "box", {d, d, 4}, rng, true)});
  }
  align_ = AlignmentHead(store, prefix + "align.", d, rng);
}

std::vector<FeatureMap> Detector::backbone(const nn::Tensor& image, int height, int width) const {
  return backbone_(image, height, width);
}

PixelFeatures Detector::encode(const nn::Tensor& image, int height, int width) const {
  const auto maps = backbone_(image, height, width);
  PixelFeatures pf;
  std::vector<nn::Tensor> srcs;
  std::vector<double> ref, anchors;
  std::vector<int> level_of;
  int start = 0;
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const auto& m = maps[l];
    pf.levels.push_back({m.height, m.width, start});
    start += m.height * m.width;
    srcs.push_back(input_norm_[l](input_proj_[l](m.tokens)));
    const double w0 = std::min(0.75, 1.5 / m.width), h0 = std::min(0.75, 1.5 / m.height);
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) {
        const double cx = (x + 0.5) / m.width, cy = (y + 0.5) / m.height;
        ref.insert(ref.end(), {cx, cy});
        anchors.insert(anchors.end(), {cx, cy, w0, h0});
        level_of.push_back(static_cast<int>(l));
      }
  }
  const int t = start;
  pf.reference = nn::Tensor(t, 2, std::move(ref));
  nn::Tensor src = nn::concat_rows(srcs);
  const nn::Tensor pos = nn::add(sine_embedding(pf.reference, cfg_.dim / 2), nn::gather_rows(level_embedding_, level_of));
  for (const auto& layer : encoder_) {
    const nn::Tensor a = layer.attn(nn::add(src, pos), pf.reference, src, pf.levels);
    src = layer.ln1(nn::add(src, a));
    src = layer.ln2(nn::add(src, layer.ffn(src)));
  }
  pf.memory = src;
  pf.features = enc_norm_(enc_proj_(src));
  const nn::Tensor anchor(t, 4, std::move(anchors));
  pf.proposals = nn::sigmoid(nn::add(nn::inverse_sigmoid(anchor), enc_box_(pf.features)));
  return pf;
}

nn::Tensor Detector::encoder_logits(const PixelFeatures& pf, const nn::Tensor& concepts) const {
  return enc_align_(pf.features, concepts);
}

QuerySelection Detector::select(const PixelFeatures& pf, std::span<const double> token_scores) const {
  if (static_cast<int>(token_scores.size()) != pf.tokens()) throw std::invalid_argument("select: score count");
  QuerySelection sel;
  sel.tokens = select_topk_queries(token_scores, std::min(cfg_.num_queries, pf.tokens()));
  for (int t : sel.tokens) sel.scores.push_back(token_scores[t]);
  sel.boxes = nn::gather_rows(pf.proposals, sel.tokens).detach();
  return sel;
}

DecoderOutput Detector::decode(const PixelFeatures& pf, const QuerySelection& sel) const {
  const int k = static_cast<int>(sel.tokens.size());
  DecoderOutput out;
  nn::Tensor tgt = k == cfg_.num_queries ? query_content_ : nn::slice_rows(query_content_, 0, k);
  nn::Tensor ref = sel.boxes;
  for (const auto& layer : decoder_) {
    const nn::Tensor pos = query_pos_(sine_embedding(ref, cfg_.dim / 2));
    const nn::Tensor qk = nn::add(tgt, pos);
    const nn::Tensor sa = layer.out(nn::multihead_attention(layer.q(qk), layer.k(qk), layer.v(tgt), cfg_.heads));
    tgt = layer.ln1(nn::add(tgt, sa));
    const nn::Tensor ca = layer.cross(nn::add(tgt, pos), ref, pf.memory, pf.levels);
    tgt = layer.ln2(nn::add(tgt, ca));
    tgt = layer.ln3(nn::add(tgt, layer.ffn(tgt)));
    const nn::Tensor box = nn::sigmoid(nn::add(nn::inverse_sigmoid(ref), layer.box(tgt)));
    out.boxes.push_back(box);
    out.hidden.push_back(tgt);
    ref = box.detach();
  }
  return out;
}

nn::Tensor Detector::align(const nn::Tensor& hidden, const nn::Tensor& concepts) const {
  return align_(hidden, concepts);
}

DetectionOutput Detector::forward(const nn::Tensor& image, int height, int width, const nn::Tensor& concepts) const {
  return forward(encode(image, height, width), concepts);
}

DetectionOutput Detector::forward(const PixelFeatures& pf, const nn::Tensor& concepts) const {
  DetectionOutput out;
  const nn::Tensor enc_logits = encoder_logits(pf, concepts);
  out.selection = select(pf, max_over_concepts(enc_logits));
  const auto dec = decode(pf, out.selection);
  out.boxes = dec.boxes;
  for (const auto& h : dec.hidden) out.logits.push_back(align(h, concepts));
  out.hidden = dec.hidden.back();
  out.encoder_boxes = nn::gather_rows(pf.proposals, out.selection.tokens);
  out.encoder_logits = nn::gather_rows(enc_logits, out.selection.tokens);
  return out;
}

MatchWeights match_weights(const DetectorConfig& cfg) {
  return {cfg.w_align, cfg.w_box, cfg.w_iou, cfg.focal_alpha, cfg.focal_gamma};
}

std::vector<double> matching_cost(std::span<const double> pred_boxes, std::span<const double> pred_logits,
                                  int num_concepts, std::span<const Box> gt_boxes,
                                  const std::vector<std::vector<int>>& gt_concepts, const MatchWeights& w) {
  const int k = static_cast<int>(pred_boxes.size() / 4);
  const int g = static_cast<int>(gt_boxes.size());
  if (static_cast<int>(gt_concepts.size()) != g) throw std::invalid_argument("matching_cost: concept list size");
  std::vector<double> cost(static_cast<std::size_t>(g) * k);
  for (int j = 0; j < g; ++j) {
    const auto gv = gt_boxes[j].to_center();
    for (int q = 0; q < k; ++q) {
      double cls = 0.0;
      for (int c : gt_concepts[j]) {
        const double p = sigmoid(pred_logits[static_cast<std::size_t>(q) * num_concepts + c]);
        cls += focal_pos_cost(p, w.alpha, w.gamma) - focal_neg_cost(p, w.alpha, w.gamma);
      }
      if (!gt_concepts[j].empty()) cls /= static_cast<double>(gt_concepts[j].size());
      const double* pb = pred_boxes.data() + static_cast<std::size_t>(q) * 4;
      double l1 = 0.0;
      for (int i = 0; i < 4; ++i) l1 += std::fabs(pb[i] - gv[i]);
      const double gi = giou(Box::from_center(pb[0], pb[1], pb[2], pb[3]), gt_boxes[j]);
      cost[static_cast<std::size_t>(j) * k + q] = w.align * cls + w.box * l1 + w.iou * (1.0 - gi);
    }
  }
  return cost;
}

std::vector<int> solve_assignment(std::span<const double> cost, int rows, int cols) {
  if (rows > cols) throw std::length_error("solve_assignment: more rows than columns");
  if (rows == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  // Shortest augmenting paths with row/column potentials, 1-based.
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<int> p(cols + 1, 0), way(cols + 1, 0);
  for (int i = 1; i <= rows; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assign(rows, -1);
  for (int j = 1; j <= cols; ++j)
    if (p[j] != 0) assign[p[j] - 1] = j - 1;
  return assign;
}

Assignment hungarian_match(const nn::Tensor& pred_boxes, const nn::Tensor& pred_logits, std::span<const Box> gt_boxes,
                           const std::vector<std::vector<int>>& gt_concepts, const MatchWeights& w) {
  const int k = pred_boxes.rows(), g = static_cast<int>(gt_boxes.size());
  if (g > k)
    throw std::length_error("hungarian_match: " + std::to_string(g) + " targets but only " + std::to_string(k) +
                            " queries");
  const auto cost = matching_cost(pred_boxes.values(), pred_logits.values(), pred_logits.cols(), gt_boxes,
                                  gt_concepts, w);
  const auto assign = solve_assignment(cost, g, k);
  Assignment a;
  for (int j = 0; j < g; ++j) {
    a.matches.push_back({assign[j], j});
    a.total_cost += cost[static_cast<std::size_t>(j) * k + assign[j]];
  }
  return a;
}

nn::Tensor contrastive_focal_loss(const nn::Tensor& logits, std::span<const double> positive_map, double alpha,
                                  double gamma) {
  double positives = 0.0;
  for (double v : positive_map) positives += v;
  return nn::sigmoid_focal_loss(logits, positive_map, alpha, gamma, std::max(1.0, positives));
}

DetectionLoss matched_loss(const nn::Tensor& boxes, const nn::Tensor& logits, const DetectionTargets& targets,
                           const DetectorConfig& cfg) {
  const auto assignment = hungarian_match(boxes, logits, targets.boxes, targets.concepts, match_weights(cfg));
  const int c = logits.cols();
  std::vector<double> pos(logits.size(), 0.0);
  std::vector<int> rows;
  std::vector<double> tgt;
  for (const auto& m : assignment.matches) {
    for (int k : targets.concepts[m.target]) pos[static_cast<std::size_t>(m.query) * c + k] = 1.0;
    rows.push_back(m.query);
    const auto cb = targets.boxes[m.target].to_center();
    tgt.insert(tgt.end(), cb.begin(), cb.end());
  }
  DetectionLoss out;
  const nn::Tensor align = contrastive_focal_loss(logits, pos, cfg.focal_alpha, cfg.focal_gamma);
  out.align = align.item();
  out.total = nn::scale(align, cfg.w_align);
  if (!rows.empty()) {
    const double norm = 1.0 / static_cast<double>(rows.size());
    const nn::Tensor picked = nn::gather_rows(boxes, rows);
    const nn::Tensor l1 = nn::scale(nn::sum(nn::abs(nn::sub(picked, nn::Tensor(picked.rows(), 4, tgt)))), norm);
    const nn::Tensor gl = nn::scale(nn::giou_loss_sum(picked, tgt), norm);
    out.box = l1.item();
    out.iou = gl.item();
    out.total = nn::add(out.total, nn::add(nn::scale(l1, cfg.w_box), nn::scale(gl, cfg.w_iou)));
  }
  out.final_matches = assignment.matches;
  return out;
}

DetectionLoss detection_loss(const DetectionOutput& out, const DetectionTargets& targets, const DetectorConfig& cfg) {
  DetectionLoss total;
  auto accumulate = [&](const DetectionLoss& part) {
    total.total = total.total.defined() ? nn::add(total.total, part.total) : part.total;
    total.align += part.align;
    total.box += part.box;
    total.iou += part.iou;
  };
  for (std::size_t l = 0; l < out.boxes.size(); ++l) {
    auto part = matched_loss(out.boxes[l], out.logits[l], targets, cfg);
    if (l + 1 == out.boxes.size()) total.final_matches = part.final_matches;
    accumulate(part);
  }
  accumulate(matched_loss(out.encoder_boxes, out.encoder_logits, targets, cfg));
  return total;
}

}  // namespace granudet
