#include "granudet/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>
#include <unordered_set>

#include "granudet/captioner.hpp"

namespace granudet {

using nlohmann::json;

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(StageConfig, stage, datasets, min_size, max_size, jitter, scale_min,
                                                scale_max, epochs, max_steps, batch_size, lr, text_lr_mult,
                                                weight_decay, warmup, grad_clip, frozen, loss_det, loss_lm, negatives,
                                                shards, seed)

StageConfig default_stage_config(int stage) {
  StageConfig c;
  c.stage = stage;
  switch (stage) {
    case 1:
      c.datasets = {"detection", "grounding"};
      c.epochs = 12;
      c.lr = 2.8e-4;
      c.jitter = true;
      c.loss_det = true;
      c.loss_lm = false;
      break;
    case 2:
      c.datasets = {"pseudo"};
      c.epochs = 3;
      c.lr = 1e-4;
      c.frozen = {"det.", "text."};
      c.loss_det = false;
      c.loss_lm = true;
      break;
    case 3:
      c.datasets = {"detection", "grounding", "pseudo"};
      c.epochs = 5;
      c.lr = 1e-4;
      c.loss_det = true;
      c.loss_lm = true;
      break;
    default:
      throw std::invalid_argument("stage must be 1, 2 or 3");
  }
  return c;
}

void validate(const StageConfig& c) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("stage config: " + m); };
  if (c.stage < 1 || c.stage > 3) fail("stage must be 1, 2 or 3");
  if (c.stage == 1 && !(c.loss_det && !c.loss_lm)) fail("stage 1 trains the detection loss only");
  if (c.stage == 2) {
    if (c.loss_det || !c.loss_lm) fail("stage 2 trains the captioning loss only");
    for (const char* p : {"det.", "text."})
      if (std::find(c.frozen.begin(), c.frozen.end(), p) == c.frozen.end())
        fail(std::string("stage 2 must freeze ") + p);
  }
  if (c.stage == 3 && !(c.loss_det && c.loss_lm)) fail("stage 3 trains detection and captioning losses");
  if (c.batch_size < 1) fail("batch_size must be positive");
  if (c.epochs < 1) fail("epochs must be positive");
  if (c.min_size < 32 || c.max_size < c.min_size) fail("bad size range");
  if (!(c.scale_min > 0) || c.scale_max < c.scale_min) fail("bad jitter scale range");
  if (c.shards < 1) fail("shards must be positive");
  if (c.negatives < 0) fail("negatives must be non-negative");
}

json to_json(const StageConfig& cfg) {
  json j;
  granudet::to_json(j, cfg);
  return j;
}

StageConfig stage_config_from_json(const json& j) {
  const json known = to_json(StageConfig{});
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw std::invalid_argument("unknown stage config key: " + k);
  json merged = to_json(default_stage_config(j.value("stage", 1)));
  merged.update(j);
  StageConfig c = merged.get<StageConfig>();
  validate(c);
  return c;
}

std::vector<SourceBatch> make_batches(std::span<const Dataset> datasets, int batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("make_batches: batch_size must be positive");
  Rng rng(seed);
  std::vector<SourceBatch> out;
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    const auto& recs = datasets[d].records;
    std::vector<std::size_t> idx(recs.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    for (std::size_t b = 0; b < idx.size(); b += batch_size) {
      SourceBatch sb;
      sb.dataset = d;
      sb.source = recs[idx[b]].source;
      sb.samples.assign(idx.begin() + b, idx.begin() + std::min(idx.size(), b + batch_size));
      for (std::size_t i : sb.samples)
        if (recs[i].source != sb.source) throw std::invalid_argument("dataset " + datasets[d].name + " mixes sources");
      out.push_back(std::move(sb));
    }
  }
  rng.shuffle(out);
  return out;
}

AugmentedSample jitter_with(const Image& image, std::span<const ObjectAnnotation> objects, double scale, int offset_x,
                            int offset_y, int target) {
  const int sh = std::max(1, static_cast<int>(std::lround(scale * image.height)));
  const int sw = std::max(1, static_cast<int>(std::lround(scale * image.width)));
  const Image scaled = resize_image(image, sh, sw);
  AugmentedSample out;
  out.image = Image(target, target, 0.5);
  for (int y = 0; y < target; ++y) {
    const int sy = y + offset_y;
    if (sy < 0 || sy >= sh) continue;
    for (int x = 0; x < target; ++x) {
      const int sx = x + offset_x;
      if (sx < 0 || sx >= sw) continue;
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = scaled.at(sy, sx, c);
    }
  }
  auto map = [&](double v, int size, int offset) { return std::clamp((v * size - offset) / target, 0.0, 1.0); };
  for (const auto& o : objects) {
    const Box b{map(o.box.x0, sw, offset_x), map(o.box.y0, sh, offset_y), map(o.box.x1, sw, offset_x),
                map(o.box.y1, sh, offset_y)};
    if (b.area() > 0) out.objects.push_back({b, o.triplet});
  }
  return out;
}

AugmentedSample large_scale_jitter(const Image& image, std::span<const ObjectAnnotation> objects, double scale_min,
                                   double scale_max, int target, Rng& rng) {
  const double s = rng.uniform(scale_min, scale_max);
  const int sh = std::max(1, static_cast<int>(std::lround(s * image.height)));
  const int sw = std::max(1, static_cast<int>(std::lround(s * image.width)));
  auto offset = [&](int size) { return size > target ? rng.uniform_int(0, size - target) : -rng.uniform_int(0, target - size); };
  const int ox = offset(sw), oy = offset(sh);
  return jitter_with(image, objects, s, ox, oy, target);
}

std::vector<std::size_t> balanced_sample(std::span<const SampleRecord> pool, std::size_t n, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    std::set<std::string> cats;
    for (const auto& o : pool[i].objects) cats.insert(o.triplet.category);
    for (const auto& c : cats) buckets[c].push_back(i);
  }
  Rng rng(seed);
  for (auto& [c, v] : buckets) rng.shuffle(v);
  std::vector<std::size_t> out;
  std::vector<bool> taken(pool.size(), false);
  std::map<std::string, std::size_t> cursor;
  while (out.size() < n) {
    bool progress = false;
    for (auto& [c, v] : buckets) {
      if (out.size() >= n) break;
      auto& k = cursor[c];
      while (k < v.size() && taken[v[k]]) ++k;
      if (k == v.size()) continue;
      taken[v[k]] = true;
      out.push_back(v[k]);
      progress = true;
    }
    if (!progress) break;
  }
  return out;
}

std::vector<std::string> dataset_categories(const Dataset& d) {
  std::set<std::string> cats;
  for (const auto& r : d.records)
    for (const auto& o : r.objects)
      for (const auto& t : positive_texts(r.source, o.triplet)) cats.insert(t);
  return {cats.begin(), cats.end()};
}

std::vector<PreparedSample> prepare_batch(const TrainingData& data, const SourceBatch& batch, const StageConfig& cfg,
                                          int size, std::uint64_t seed) {
  const Dataset& ds = data.datasets.at(batch.dataset);
  Rng rng(seed);
  std::map<std::string, std::int64_t> det_counts;
  for (const auto& c : data.det_categories) det_counts[normalize_text(c)] = 1;
  const NounCorpus det_corpus(det_counts);
  const NounCorpus& neg_corpus = batch.source == SourceKind::detection ? det_corpus : data.corpus;

  std::vector<PreparedSample> out;
  std::vector<std::unordered_set<std::string>> exclusions;
  std::vector<std::vector<std::string>> negatives;
  for (std::size_t i : batch.samples) {
    const SampleRecord& r = ds.records.at(i);
    const std::string file = ds.image_file(i);
    const Image raw = data.images ? data.images->get(file) : read_image(file);
    AugmentedSample aug;
    if (cfg.jitter) {
      aug = large_scale_jitter(raw, r.objects, cfg.scale_min, cfg.scale_max, size, rng);
    } else {
      aug.image = resize_image(raw, size, size);
      aug.objects = r.objects;
    }
    PreparedSample p;
    p.image = std::move(aug.image);
    p.caption = r.caption;
    p.source = r.source;
    std::unordered_set<std::string> own;
    for (const auto& o : r.objects) {
      own.insert(normalize_text(o.triplet.phrase));
      own.insert(normalize_text(o.triplet.category));
    }
    for (const auto& o : aug.objects) {
      std::vector<int> cols;
      for (const auto& t : positive_texts(r.source, o.triplet)) {
        const std::string n = normalize_text(t);
        auto it = std::find(p.concepts.begin(), p.concepts.end(), n);
        if (it == p.concepts.end()) {
          p.concepts.push_back(n);
          it = p.concepts.end() - 1;
        }
        cols.push_back(static_cast<int>(it - p.concepts.begin()));
      }
      p.targets.boxes.push_back(o.box);
      p.targets.concepts.push_back(cols);
      p.object_texts.push_back(format_object_groundtruth(o.triplet));
    }
    std::vector<std::string> own_list(own.begin(), own.end());
    std::sort(own_list.begin(), own_list.end());
    negatives.push_back(neg_corpus.empty() || cfg.negatives == 0
                            ? std::vector<std::string>{}
                            : sample_negatives(own_list, neg_corpus, cfg.negatives, rng.next()).concepts);
    exclusions.push_back(std::move(own));
    out.push_back(std::move(p));
  }
  // Per-shard pools, then one deduplicated pool for the whole batch.
  std::vector<std::vector<std::string>> shard_pools;
  const std::size_t n = out.size(), shards = std::min<std::size_t>(cfg.shards, std::max<std::size_t>(1, n));
  for (std::size_t s = 0; s < shards; ++s) {
    std::vector<std::vector<std::string>> members;
    for (std::size_t i = s * n / shards; i < (s + 1) * n / shards; ++i) members.push_back(negatives[i]);
    shard_pools.push_back(merge_negative_pools(members));
  }
  const auto pool = merge_negative_pools(shard_pools);
  for (std::size_t i = 0; i < n; ++i)
    for (const auto& c : pool)
      if (!exclusions[i].count(c) && std::find(out[i].concepts.begin(), out[i].concepts.end(), c) == out[i].concepts.end())
        out[i].concepts.push_back(c);
  return out;
}

BatchLoss batch_loss(Model& model, std::span<const PreparedSample> batch, const StageConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  const bool det_frozen = nn::has_prefix("det.", cfg.frozen) && nn::has_prefix("text.", cfg.frozen);
  std::vector<nn::Tensor> det_terms, lm_terms;
  BatchLoss out;
  for (const auto& s : batch) {
    const bool want_lm = cfg.loss_lm && s.source == SourceKind::image_text;
    if (!cfg.loss_det && !want_lm) continue;
    std::optional<nn::NoGradGuard> ng;
    if (det_frozen) ng.emplace();
    const PixelFeatures pf = model.detector.encode(s.image.tensor(), s.image.height, s.image.width);
    if (s.concepts.empty()) {
      ng.reset();
      if (want_lm && !s.caption.empty()) lm_terms.push_back(image_caption_loss(model.captioner, pf, s.caption));
      continue;
    }
    const DetectionOutput det = model.detector.forward(pf, model.text.encode(s.concepts));
    std::vector<Match> matches;
    if (cfg.loss_det) {
      DetectionLoss dl = detection_loss(det, s.targets, model.config.detector);
      det_terms.push_back(dl.total);
      matches = std::move(dl.final_matches);
    } else if (want_lm && !s.targets.boxes.empty()) {
      matches = hungarian_match(det.boxes.back(), det.logits.back(), s.targets.boxes, s.targets.concepts,
                                match_weights(model.config.detector))
                    .matches;
    }
    ng.reset();
    if (!want_lm) continue;
    nn::Tensor lm;
    const CaptionLoss obj = object_caption_loss(model.captioner, pf, det, matches, s.object_texts);
    if (!obj.skipped()) lm = obj.loss;
    if (!s.caption.empty()) {
      const nn::Tensor img = image_caption_loss(model.captioner, pf, s.caption);
      lm = lm.defined() ? nn::add(lm, img) : img;
    }
    if (lm.defined()) lm_terms.push_back(lm);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  auto sum = [&](const std::vector<nn::Tensor>& terms) {
    nn::Tensor t = nn::Tensor::scalar(0.0);
    for (const auto& x : terms) t = nn::add(t, x);
    return nn::scale(t, inv);
  };
  const nn::Tensor det_sum = sum(det_terms), lm_sum = sum(lm_terms);
  out.det = det_sum.item();
  out.lm = lm_sum.item();
  out.lm_terms = static_cast<int>(lm_terms.size());
  out.total = nn::add(det_sum, lm_sum);
  return out;
}

json to_json(const StepLog& s) {
  return {{"stage", s.stage}, {"step", s.step}, {"loss", s.total}, {"loss_det", s.det}, {"loss_lm", s.lm}, {"lr", s.lr}};
}

StageResult run_stage(Model& model, const StageConfig& cfg, const TrainingData& data,
                      const std::function<void(const StepLog&)>& on_step) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  TrainingData selected;
  selected.corpus = data.corpus;
  selected.det_categories = data.det_categories;
  selected.images = data.images;
  for (const auto& d : data.datasets)
    if (cfg.datasets.empty() || std::find(cfg.datasets.begin(), cfg.datasets.end(), d.name) != cfg.datasets.end())
      selected.datasets.push_back(d);
  for (const auto& name : cfg.datasets)
    if (std::none_of(data.datasets.begin(), data.datasets.end(), [&](const Dataset& d) { return d.name == name; }))
      throw std::invalid_argument("stage " + std::to_string(cfg.stage) + ": unknown dataset " + name);
  if (selected.datasets.empty()) throw std::invalid_argument("stage has no data");

  StageResult res;
  res.frozen_hash_before = cfg.frozen.empty() ? 0 : model.store.hash(cfg.frozen);
  const std::function<bool(const std::string&)> trainable = [&](const std::string& name) {
    return !nn::has_prefix(name, cfg.frozen);
  };
  auto lr_scale = [&](const std::string& name) {
    if (!trainable(name)) return 0.0;
    return name.rfind("text.", 0) == 0 ? cfg.text_lr_mult : 1.0;
  };
  nn::AdamW opt(model.store, {0.9, 0.999, 1e-8, cfg.weight_decay});
  std::size_t per_epoch = 0;
  for (const auto& d : selected.datasets) per_epoch += (d.records.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::int64_t total = static_cast<std::int64_t>(per_epoch) * cfg.epochs;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
  Rng size_rng(cfg.seed ^ 0x5bd1e995ULL);
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    const auto batches = make_batches(selected.datasets, cfg.batch_size, cfg.seed * 1000003ULL + epoch);
    for (const auto& b : batches) {
      if (step >= total) break;
      const int lo = cfg.min_size / 32, hi = cfg.max_size / 32;
      const int size = lo == hi ? cfg.min_size : 32 * size_rng.uniform_int(lo, hi);
      const auto prepared = prepare_batch(selected, b, cfg, size, cfg.seed * 7919ULL + static_cast<std::uint64_t>(step));
      model.store.zero_grad();
      const BatchLoss bl = batch_loss(model, prepared, cfg);
      const double lr = nn::warmup_cosine_lr(cfg.lr, step, cfg.warmup, total);
      if (bl.total.requires_grad()) {
        bl.total.backward();
        if (cfg.grad_clip > 0) nn::clip_grad_norm(model.store, cfg.grad_clip, trainable);
        opt.step(lr, lr_scale);
      }
      const StepLog log{cfg.stage, step, bl.total.item(), bl.det, bl.lm, lr};
      res.log.push_back(log);
      if (on_step) on_step(log);
      ++step;
    }
  }
  res.frozen_hash_after = cfg.frozen.empty() ? 0 : model.store.hash(cfg.frozen);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace granudet
