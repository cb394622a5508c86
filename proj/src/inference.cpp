#include "granudet/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <tuple>
#include <unordered_map>

namespace granudet {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<std::pair<int, int>> chunk_ranges(int n, int chunk) {
  if (chunk <= 0) chunk = n;
  std::vector<std::pair<int, int>> out;
  for (int b = 0; b < n; b += chunk) out.emplace_back(b, std::min(n, b + chunk));
  return out;
}

template <typename T>
std::vector<T> sub(std::span<const T> v, int b, int e) {
  return std::vector<T>(v.begin() + b, v.begin() + e);
}

std::vector<std::size_t> by_score(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Precision envelope integrated over recall.
double all_point_ap(const std::vector<bool>& tp, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> precision(tp.size()), recall(tp.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    hits += tp[i];
    precision[i] = static_cast<double>(hits) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(hits) / static_cast<double>(num_gt);
  }
  for (std::size_t i = tp.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    ap += (recall[i] - prev) * precision[i];
    prev = recall[i];
  }
  return ap;
}

// Greedy matching by descending score. `eligible(p, g)` gates a pair.
template <typename Eligible>
double matched_ap(std::span<const ScoredDetection> preds, std::span<const GroundTruth> gts, double iou_threshold,
                  Eligible eligible) {
  std::unordered_map<std::string, std::vector<std::size_t>> by_image;
  for (std::size_t g = 0; g < gts.size(); ++g) by_image[gts[g].image_id].push_back(g);
  std::vector<double> scores;
  for (const auto& p : preds) scores.push_back(p.score);
  std::vector<bool> used(gts.size(), false), tp;
  for (std::size_t i : by_score(scores)) {
    const auto it = by_image.find(preds[i].image_id);
    std::ptrdiff_t best = -1;
    double best_iou = 0.0;
    if (it != by_image.end())
      for (std::size_t g : it->second) {
        if (used[g] || !eligible(preds[i], gts[g])) continue;
        const double v = iou(preds[i].box, gts[g].box);
        if (v >= iou_threshold && (best < 0 || v > best_iou)) {
          best = static_cast<std::ptrdiff_t>(g);
          best_iou = v;
        }
      }
    if (best >= 0) used[best] = true;
    tp.push_back(best >= 0);
  }
  return all_point_ap(tp, gts.size());
}

}  // namespace

Box to_corner_box(std::span<const double> c) {
  constexpr double kMin = 1e-6;
  auto axis = [&](double centre, double extent) {
    double lo = std::clamp(centre - extent / 2, 0.0, 1.0), hi = std::clamp(centre + extent / 2, 0.0, 1.0);
    if (hi - lo < kMin) {
      const double m = std::clamp(centre, kMin / 2, 1.0 - kMin / 2);
      lo = m - kMin / 2;
      hi = m + kMin / 2;
    }
    return std::pair{lo, hi};
  };
  const auto [x0, x1] = axis(c[0], c[2]);
  const auto [y0, y1] = axis(c[1], c[3]);
  return {x0, y0, x1, y1};
}

nlohmann::json to_json(const Prediction& p, std::span<const std::string> categories) {
  nlohmann::json j{{"image_id", p.image_id}, {"box", box_to_json(p.box)}, {"score", p.score}, {"query", p.query}};
  if (p.concept_index >= 0 && p.concept_index < static_cast<int>(categories.size()))
    j["category"] = categories[p.concept_index];
  if (p.label) {
    if (p.label->triplet) {
      j["phrase"] = p.label->triplet->phrase;
      j["category"] = p.label->triplet->category;
      j["parent"] = p.label->triplet->parent_category;
    } else {
      j["text"] = p.label->text;
    }
    j["logprob"] = p.label->logprob;
    j["objectness"] = p.label->objectness;
  }
  return j;
}

DetectionScores detection_scores(const Model& model, const Image& image, std::span<const std::string> categories,
                                 int chunk_size) {
  if (categories.empty()) throw std::invalid_argument("detect: no categories");
  nn::NoGradGuard ng;
  const Detector& det = model.detector;
  const PixelFeatures pf = det.encode(image.tensor(), image.height, image.width);
  const int c = static_cast<int>(categories.size());
  const auto chunks = chunk_ranges(c, chunk_size);
  std::vector<nn::Tensor> embeddings;
  std::vector<double> token_max(pf.tokens(), -std::numeric_limits<double>::infinity());
  for (const auto& [b, e] : chunks) {
    embeddings.push_back(model.text.encode(sub(categories, b, e)));
    const auto m = max_over_concepts(det.encoder_logits(pf, embeddings.back()));
    for (int t = 0; t < pf.tokens(); ++t) token_max[t] = std::max(token_max[t], m[t]);
  }
  const auto dec = det.decode(pf, det.select(pf, token_max));
  const nn::Tensor& hidden = dec.hidden.back();
  const nn::Tensor& boxes = dec.boxes.back();
  DetectionScores out;
  out.categories = c;
  const int k = hidden.rows();
  for (int q = 0; q < k; ++q) out.boxes.push_back(to_corner_box(boxes.values().subspan(q * 4, 4)));
  out.scores.assign(static_cast<std::size_t>(k) * c, 0.0);
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    const auto [b, e] = chunks[i];
    const nn::Tensor logits = det.align(hidden, embeddings[i]);
    for (int q = 0; q < k; ++q)
      for (int j = b; j < e; ++j) out.scores[static_cast<std::size_t>(q) * c + j] = sigmoid(logits(q, j - b));
  }
  return out;
}

std::vector<Prediction> detect(const Model& model, const Image& image, std::span<const std::string> categories,
                               const DetectOptions& opts, const std::string& image_id) {
  const auto ds = detection_scores(model, image, categories, opts.chunk_size);
  const int k = static_cast<int>(ds.boxes.size()), c = ds.categories;
  std::vector<Prediction> out;
  for (const auto& [b, e] : chunk_ranges(c, opts.chunk_size)) {
    std::vector<Prediction> chunk;
    std::vector<double> scores;
    for (int q = 0; q < k; ++q)
      for (int j = b; j < e; ++j) {
        const double s = ds.scores[static_cast<std::size_t>(q) * c + j];
        chunk.push_back({image_id, ds.boxes[q], q, j, s, std::nullopt});
        scores.push_back(s);
      }
    const auto order = by_score(scores);
    const std::size_t keep = std::min<std::size_t>(order.size(), std::max(0, opts.retain_top));
    for (std::size_t i = 0; i < keep; ++i) out.push_back(chunk[order[i]]);
  }
  std::stable_sort(out.begin(), out.end(), [](const Prediction& a, const Prediction& b) { return a.score > b.score; });
  return out;
}

GeneratedLabel CaptionerLabeler::label(const nn::Tensor& hidden_row, const nn::Tensor& box_row,
                                       const PixelFeatures& pf) {
  const Captioner& cap = model_.captioner;
  return cap.generate(cap.object_queries(hidden_row, box_row), box_references(box_row), pf, Vocabulary::kObj, max_len_);
}

std::vector<Prediction> generative_detect(const Model& model, const NounCorpus& corpus, const Image& image,
                                          const GenerativeOptions& opts, const std::string& image_id,
                                          ObjectLabeler* labeler) {
  const auto concepts = top_frequent(corpus, opts.corpus_size);
  if (concepts.empty()) throw std::invalid_argument("generative_detect: empty corpus");
  CaptionerLabeler fallback(model, opts.max_len);
  if (!labeler) labeler = &fallback;
  nn::NoGradGuard ng;
  const Detector& det = model.detector;
  const PixelFeatures pf = det.encode(image.tensor(), image.height, image.width);
  const nn::Tensor emb = model.text.encode(concepts);
  const auto dec = det.decode(pf, det.select(pf, max_over_concepts(det.encoder_logits(pf, emb))));
  const nn::Tensor& hidden = dec.hidden.back();
  const nn::Tensor& boxes = dec.boxes.back();
  const auto fg = max_over_concepts(det.align(hidden, emb));
  const auto queries = select_topk_queries(fg, std::min(std::max(opts.top_k, 0), hidden.rows()));
  std::vector<Prediction> kept;
  for (int q : queries) {
    const int row[] = {q};
    const nn::Tensor h = nn::gather_rows(hidden, row);
    GeneratedLabel label = labeler->label(h, nn::gather_rows(boxes, row), pf);
    label.objectness = recalibrate_objectness(det, h, label, model.text);
    if (!(label.objectness > opts.score_threshold)) continue;
    const Box box = to_corner_box(boxes.values().subspan(static_cast<std::size_t>(q) * 4, 4));
    kept.push_back({image_id, box, q, -1, label.objectness, std::move(label)});
  }
  std::vector<Box> bx;
  std::vector<double> sc;
  for (const auto& p : kept) {
    bx.push_back(p.box);
    sc.push_back(p.score);
  }
  std::vector<Prediction> out;
  for (int i : class_agnostic_nms(bx, sc, opts.nms_iou)) out.push_back(kept[i]);
  return out;
}

std::optional<TaxonomyMatch> map_generated_to_taxonomy(const GeneratedLabel& label,
                                                       std::span<const std::string> class_names,
                                                       const TextEncoder& text, double sim_threshold) {
  if (label.malformed() || class_names.empty()) return std::nullopt;
  nn::NoGradGuard ng;
  return map_generated_to_taxonomy(label, text.encode(class_names), text, sim_threshold);
}

std::optional<TaxonomyMatch> map_generated_to_taxonomy(const GeneratedLabel& label, const nn::Tensor& class_embeddings,
                                                       const TextEncoder& text, double sim_threshold) {
  if (label.malformed() || class_embeddings.rows() == 0) return std::nullopt;
  nn::NoGradGuard ng;
  const nn::Tensor e = text.encode_one(label.triplet->category);
  TaxonomyMatch best;
  for (int c = 0; c < class_embeddings.rows(); ++c) {
    double s = 0.0;
    for (int d = 0; d < e.cols(); ++d) s += e(0, d) * class_embeddings(c, d);
    if (best.index < 0 || s > best.similarity) best = {c, s};
  }
  if (best.similarity < sim_threshold) return std::nullopt;
  return best;
}

double average_precision(std::span<const ScoredDetection> preds, std::span<const GroundTruth> gts, double iou_threshold) {
  return matched_ap(preds, gts, iou_threshold, [](const ScoredDetection&, const GroundTruth&) { return true; });
}

double mean_average_precision(std::span<const ScoredDetection> preds, std::span<const GroundTruth> gts,
                              double iou_threshold, std::span<const int> classes) {
  double total = 0.0;
  int n = 0;
  for (int c : classes) {
    std::vector<ScoredDetection> p;
    std::vector<GroundTruth> g;
    for (const auto& x : preds)
      if (x.label == c) p.push_back(x);
    for (const auto& x : gts)
      if (x.label == c) g.push_back(x);
    if (g.empty()) continue;
    total += average_precision(p, g, iou_threshold);
    ++n;
  }
  return n ? total / n : 0.0;
}

double fixed_ap(std::span<const ScoredDetection> retained, std::span<const ScoredDetection> candidates,
                std::span<const GroundTruth> gts, std::size_t min_dets, double iou_threshold) {
  std::vector<int> classes;
  for (const auto& g : gts) classes.push_back(g.label);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  double total = 0.0;
  for (int c : classes) {
    std::vector<ScoredDetection> pool;
    std::map<std::tuple<std::string, double, double, double, double>, std::size_t> seen;
    auto add = [&](const ScoredDetection& d) {
      const auto key = std::make_tuple(d.image_id, d.box.x0, d.box.y0, d.box.x1, d.box.y1);
      auto it = seen.find(key);
      if (it == seen.end()) {
        seen.emplace(key, pool.size());
        pool.push_back(d);
      } else {
        pool[it->second].score = std::max(pool[it->second].score, d.score);
      }
    };
    for (const auto& d : retained)
      if (d.label == c) add(d);
    std::vector<ScoredDetection> cand;
    std::vector<double> scores;
    for (const auto& d : candidates)
      if (d.label == c) {
        cand.push_back(d);
        scores.push_back(d.score);
      }
    const auto order = by_score(scores);
    for (std::size_t i = 0; i < std::min(min_dets, order.size()); ++i) add(cand[order[i]]);
    std::vector<GroundTruth> g;
    for (const auto& x : gts)
      if (x.label == c) g.push_back(x);
    total += average_precision(pool, g, iou_threshold);
  }
  return classes.empty() ? 0.0 : total / static_cast<double>(classes.size());
}

double token_f1(std::string_view a, std::string_view b) {
  const auto ta = pretokenize(a), tb = pretokenize(b);
  if (ta.empty() && tb.empty()) return 1.0;
  if (ta.empty() || tb.empty()) return 0.0;
  std::map<std::string, int> count;
  for (const auto& t : ta) ++count[t];
  int common = 0;
  for (const auto& t : tb)
    if (count[t] > 0) {
      --count[t];
      ++common;
    }
  if (common == 0) return 0.0;
  const double p = static_cast<double>(common) / ta.size(), r = static_cast<double>(common) / tb.size();
  return 2 * p * r / (p + r);
}

double dense_caption_map(std::span<const ScoredDetection> preds, std::span<const GroundTruth> gts,
                         std::span<const double> iou_thresholds, std::span<const double> text_thresholds) {
  if (iou_thresholds.empty() || text_thresholds.empty()) throw std::invalid_argument("dense_caption_map: empty grid");
  double total = 0.0;
  for (double ti : iou_thresholds)
    for (double tt : text_thresholds)
      total += matched_ap(preds, gts, ti, [tt](const ScoredDetection& p, const GroundTruth& g) {
        return token_f1(p.text, g.text) >= tt;
      });
  return total / static_cast<double>(iou_thresholds.size() * text_thresholds.size());
}

SampleRecord to_class_agnostic(const SampleRecord& r) {
  SampleRecord out = r;
  out.source = SourceKind::detection;
  for (auto& o : out.objects) o.triplet = make_triplet("object", "object", "object");
  return out;
}

double exact_triplet_accuracy(std::span<const Prediction> preds, std::span<const SampleRecord> gts,
                              double iou_threshold) {
  std::unordered_map<std::string, const SampleRecord*> by_image;
  std::size_t total = 0;
  for (const auto& r : gts) {
    by_image[r.image_id] = &r;
    total += r.objects.size();
  }
  if (total == 0) return 0.0;
  std::map<std::string, std::vector<bool>> used;
  std::vector<double> scores;
  for (const auto& p : preds) scores.push_back(p.score);
  std::size_t correct = 0;
  for (std::size_t i : by_score(scores)) {
    const auto it = by_image.find(preds[i].image_id);
    if (it == by_image.end()) continue;
    const auto& objs = it->second->objects;
    auto& u = used[preds[i].image_id];
    u.resize(objs.size(), false);
    std::ptrdiff_t best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < objs.size(); ++g) {
      if (u[g]) continue;
      const double v = iou(preds[i].box, objs[g].box);
      if (v >= iou_threshold && (best < 0 || v > best_iou)) {
        best = static_cast<std::ptrdiff_t>(g);
        best_iou = v;
      }
    }
    if (best < 0) continue;
    u[best] = true;
    if (preds[i].label && preds[i].label->triplet == objs[best].triplet) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

std::vector<ScoredBox> ModelBoxScorer::detect(const Image& image, std::span<const std::string> texts) {
  const auto ds = detection_scores(model_, image, texts, chunk_size_);
  std::vector<ScoredBox> out;
  const std::size_t c = texts.size();
  for (std::size_t q = 0; q < ds.boxes.size(); ++q)
    out.push_back({ds.boxes[q], std::vector<double>(ds.scores.begin() + q * c, ds.scores.begin() + (q + 1) * c)});
  return out;
}

}  // namespace granudet
