#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "granudet/synth.hpp"
#include "granudet/training.hpp"

using namespace granudet;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.detector.dim = c.text.dim = c.captioner.dim = 16;
  c.detector.heads = c.text.heads = c.captioner.heads = 2;
  c.detector.ffn = c.text.ffn = c.captioner.ffn = 32;
  c.detector.num_queries = 6;
  c.captioner.image_queries = 4;
  c.detector.encoder_layers = c.detector.decoder_layers = 1;
  c.text.layers = c.captioner.layers = 1;
  c.captioner.max_len = 16;
  return c;
}

// Small synthetic data with an in-memory image-text split.
struct Fixture {
  TrainingData data;
  ImageCache cache;
  Vocabulary vocab;

  Fixture() {
    const fs::path dir = fs::temp_directory_path() / "granudet_test_training";
    fs::remove_all(dir);
    SyntheticShapesSpec spec;
    spec.detection_images = 16;
    spec.grounding_images = 8;
    spec.image_text_images = 4;
    spec.val_heldout_images = 2;
    spec.val_images = 2;
    spec.seed = 21;
    const auto out = generate_synthetic(spec, dir.string());
    Dataset det = Dataset::load(out.detection, "detection");
    Dataset grd = Dataset::load(out.grounding, "grounding");
    Dataset pseudo = grd;
    pseudo.name = "pseudo";
    for (auto& r : pseudo.records) {
      r.source = SourceKind::image_text;
      r.caption = "An image of shapes on a grey background.";
    }
    data.det_categories = dataset_categories(det);
    std::vector<EntityTriplet> ents;
    std::vector<std::string> texts{"An image of shapes on a grey background."};
    for (const auto& d : {det, grd})
      for (const auto& r : d.records)
        for (const auto& o : r.objects) {
          ents.push_back(o.triplet);
          texts.push_back(format_object_groundtruth(o.triplet));
        }
    data.corpus = build_corpus(ents, 1);
    data.datasets = {det, grd, pseudo};
    data.images = &cache;
    vocab = Vocabulary::build(texts);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

StageConfig quick(int stage) {
  StageConfig c = default_stage_config(stage);
  c.epochs = 1;
  c.max_steps = 3;
  c.batch_size = 4;
  c.warmup = 0;
  c.negatives = 4;
  c.seed = 13;
  return c;
}

SampleRecord rec(const std::vector<std::string>& cats) {
  SampleRecord r;
  for (const auto& c : cats) r.objects.push_back({Box{0, 0, 0.5, 0.5}, make_triplet(c, c, "shape")});
  return r;
}

}  // namespace

TEST(Batches, PureAndProportional) {
  std::vector<Dataset> ds(2);
  ds[0].name = "a";
  ds[1].name = "b";
  ds[0].records.resize(400);
  ds[1].records.resize(400);
  ds[1].records.front().source = SourceKind::grounding;
  EXPECT_THROW(make_batches(ds, 8, 3), std::invalid_argument);
  ds[1].records.front().source = SourceKind::detection;
  const auto batches = make_batches(ds, 8, 3);
  std::map<std::size_t, int> per;
  std::vector<std::set<std::size_t>> seen(2);
  int first_half_a = 0;
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const auto& b = batches[i];
    ++per[b.dataset];
    for (std::size_t s : b.samples) EXPECT_TRUE(seen[b.dataset].insert(s).second);
    if (i < batches.size() / 2 && b.dataset == 0) ++first_half_a;
  }
  EXPECT_EQ(per[0], 50);
  EXPECT_EQ(per[1], 50);
  EXPECT_EQ(seen[0].size(), 400u);
  EXPECT_EQ(seen[1].size(), 400u);
  // Interleaved rather than one dataset after the other.
  EXPECT_GT(first_half_a, 10);
  EXPECT_LT(first_half_a, 40);
  // Same seed, same order.
  const auto again = make_batches(ds, 8, 3);
  for (std::size_t i = 0; i < batches.size(); ++i) EXPECT_EQ(again[i].samples, batches[i].samples);
}

TEST(Batches, DatasetPurityOnRealBatches) {
  auto& f = fixture();
  for (const auto& b : make_batches(f.data.datasets, 4, 1))
    for (std::size_t s : b.samples) EXPECT_EQ(f.data.datasets[b.dataset].records[s].source, b.source);
}

TEST(Jitter, IdentityAndDoubling) {
  Image img(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = (x * 16 + y + c) / 800.0;
  const std::vector<ObjectAnnotation> objs{{Box{0.25, 0.25, 0.5, 0.75}, make_triplet("a", "a", "a")},
                                           {Box{0.75, 0.75, 1.0, 1.0}, make_triplet("b", "b", "b")}};
  const auto same = jitter_with(img, objs, 1.0, 0, 0, 16);
  EXPECT_EQ(same.image.rgb, img.rgb);
  ASSERT_EQ(same.objects.size(), 2u);
  EXPECT_DOUBLE_EQ(same.objects[0].box.x1, 0.5);

  // Scale 2 with a top-left crop doubles coordinates and drops the object
  // that falls outside.
  const auto big = jitter_with(img, objs, 2.0, 0, 0, 16);
  ASSERT_EQ(big.objects.size(), 1u);
  EXPECT_DOUBLE_EQ(big.objects[0].box.x0, 0.5);
  EXPECT_DOUBLE_EQ(big.objects[0].box.y1, 1.0);
  EXPECT_EQ(big.objects[0].triplet.phrase, "a");

  // Scale 1/2 pads: boxes halve.
  const auto small = jitter_with(img, objs, 0.5, 0, 0, 16);
  ASSERT_EQ(small.objects.size(), 2u);
  EXPECT_DOUBLE_EQ(small.objects[1].box.x0, 0.375);
  EXPECT_DOUBLE_EQ(small.image.at(15, 15, 0), 0.5);

  // A crop that misses every object.
  EXPECT_TRUE(jitter_with(img, objs, 2.0, 0, 16, 8).objects.size() <= 1u);
  EXPECT_TRUE(jitter_with(img, std::vector<ObjectAnnotation>{objs[0]}, 1.0, 12, 12, 4).objects.empty());
}

TEST(Jitter, RandomBoxesStayValid) {
  Rng rng(5);
  Image img(32, 32, 0.2);
  for (int t = 0; t < 300; ++t) {
    std::vector<ObjectAnnotation> objs;
    for (int k = 0; k < 3; ++k) {
      const double x = rng.uniform(0, 0.8), y = rng.uniform(0, 0.8);
      objs.push_back({Box{x, y, x + rng.uniform(0.02, 0.2), y + rng.uniform(0.02, 0.2)}, make_triplet("o", "o", "o")});
    }
    const auto out = large_scale_jitter(img, objs, 0.1, 2.0, 32, rng);
    EXPECT_EQ(out.image.height, 32);
    EXPECT_LE(out.objects.size(), objs.size());
    for (const auto& o : out.objects) {
      EXPECT_TRUE(o.box.valid());
      EXPECT_GE(o.box.x0, 0.0);
      EXPECT_LE(o.box.x1, 1.0);
      EXPECT_GT(o.box.area(), 0.0);
    }
  }
}

TEST(BalancedSample, CoversEveryCategory) {
  std::vector<SampleRecord> pool;
  for (int i = 0; i < 90; ++i) pool.push_back(rec({"common"}));
  for (int i = 0; i < 5; ++i) pool.push_back(rec({"rare"}));
  for (int i = 0; i < 5; ++i) pool.push_back(rec({"other"}));
  const auto pick = balanced_sample(pool, 12, 2);
  ASSERT_EQ(pick.size(), 12u);
  std::map<std::string, int> n;
  for (std::size_t i : pick) ++n[pool[i].objects[0].triplet.category];
  EXPECT_EQ(n["common"], 4);
  EXPECT_EQ(n["rare"], 4);
  EXPECT_EQ(n["other"], 4);
  EXPECT_EQ(std::set<std::size_t>(pick.begin(), pick.end()).size(), pick.size());
  // Exhausted buckets fall through to the rest; the pool caps the output.
  EXPECT_EQ(balanced_sample(pool, 40, 2).size(), 40u);
  EXPECT_EQ(balanced_sample(pool, 500, 2).size(), 100u);
}

TEST(StageConfigs, DefaultsAndValidation) {
  const auto s1 = default_stage_config(1), s2 = default_stage_config(2), s3 = default_stage_config(3);
  EXPECT_EQ(s1.epochs, 12);
  EXPECT_DOUBLE_EQ(s1.lr, 2.8e-4);
  EXPECT_DOUBLE_EQ(s1.text_lr_mult, 0.1);
  EXPECT_DOUBLE_EQ(s1.weight_decay, 0.05);
  EXPECT_EQ(s1.warmup, 1000);
  EXPECT_DOUBLE_EQ(s1.grad_clip, 0.1);
  EXPECT_EQ(s2.epochs, 3);
  EXPECT_DOUBLE_EQ(s2.lr, 1e-4);
  EXPECT_EQ(s3.epochs, 5);
  EXPECT_DOUBLE_EQ(s3.text_lr_mult, 0.1);
  EXPECT_TRUE(s1.loss_det && !s1.loss_lm);
  EXPECT_TRUE(!s2.loss_det && s2.loss_lm);
  EXPECT_TRUE(s3.loss_det && s3.loss_lm);

  auto bad = s2;
  bad.frozen = {"det."};
  EXPECT_THROW(validate(bad), std::invalid_argument);
  bad = s1;
  bad.loss_lm = true;
  EXPECT_THROW(validate(bad), std::invalid_argument);
  EXPECT_THROW(default_stage_config(4), std::invalid_argument);

  nlohmann::json j{{"stage", 2}, {"epochs", 7}};
  const auto parsed = stage_config_from_json(j);
  EXPECT_EQ(parsed.epochs, 7);
  EXPECT_EQ(parsed.frozen, s2.frozen);
  EXPECT_THROW(stage_config_from_json({{"stage", 1}, {"learning_rate", 1.0}}), std::invalid_argument);
  EXPECT_THROW(stage_config_from_json({{"stage", 2}, {"frozen", nlohmann::json::array()}}), std::invalid_argument);
  EXPECT_EQ(to_json(stage_config_from_json(to_json(s3))), to_json(s3));
}

TEST(PrepareBatch, PositivesFirstAndNegativesExcludeOwnTexts) {
  auto& f = fixture();
  const auto cfg = quick(3);
  for (const auto& b : make_batches(f.data.datasets, 4, 9)) {
    const auto prepared = prepare_batch(f.data, b, cfg, 64, 17);
    ASSERT_EQ(prepared.size(), b.samples.size());
    for (std::size_t i = 0; i < prepared.size(); ++i) {
      const auto& p = prepared[i];
      const auto& r = f.data.datasets[b.dataset].records[b.samples[i]];
      std::set<std::string> own;
      for (const auto& o : r.objects)
        for (const auto& t : {o.triplet.phrase, o.triplet.category}) own.insert(normalize_text(t));
      std::set<int> positive_cols;
      for (const auto& cols : p.targets.concepts) positive_cols.insert(cols.begin(), cols.end());
      for (std::size_t c = 0; c < p.concepts.size(); ++c) {
        if (positive_cols.count(static_cast<int>(c))) {
          EXPECT_TRUE(own.count(p.concepts[c]));
          EXPECT_LT(c, positive_cols.size());
        } else {
          EXPECT_FALSE(own.count(p.concepts[c])) << p.concepts[c];
        }
      }
      EXPECT_EQ(std::set<std::string>(p.concepts.begin(), p.concepts.end()).size(), p.concepts.size());
      for (const auto& cols : p.targets.concepts)
        EXPECT_EQ(cols.size(), positive_texts(r.source, r.objects[0].triplet).size());
    }
    // Deterministic in the seed.
    const auto again = prepare_batch(f.data, b, cfg, 64, 17);
    for (std::size_t i = 0; i < again.size(); ++i) EXPECT_EQ(again[i].concepts, prepared[i].concepts);
  }
}

TEST(Stages, StageTwoLeavesDetectorUntouched) {
  auto& f = fixture();
  Model m(f.vocab, tiny_config(), 3);
  const auto det_before = m.store.hash({"det.", "text."});
  const auto cap_before = m.store.hash({"cap."});
  const StageResult r = run_stage(m, quick(2), f.data);
  EXPECT_EQ(r.frozen_hash_before, r.frozen_hash_after);
  EXPECT_EQ(m.store.hash({"det.", "text."}), det_before);
  EXPECT_NE(m.store.hash({"cap."}), cap_before);
  for (const auto& l : r.log) {
    EXPECT_EQ(l.det, 0.0);
    EXPECT_GT(l.lm, 0.0);
  }
}

TEST(Stages, StageThreeLossRecomposes) {
  auto& f = fixture();
  Model m(f.vocab, tiny_config(), 4);
  const auto s3 = quick(3);
  auto det_only = s3, lm_only = s3;
  det_only.loss_lm = false;
  lm_only.loss_det = false;
  int checked = 0;
  for (const auto& b : make_batches(f.data.datasets, 4, 2)) {
    const auto prepared = prepare_batch(f.data, b, s3, 64, 5);
    const double total = batch_loss(m, prepared, s3).total.item();
    const double det = batch_loss(m, prepared, det_only).total.item();
    const double lm = batch_loss(m, prepared, lm_only).total.item();
    EXPECT_NEAR(total, det + lm, 1e-7);
    const auto full = batch_loss(m, prepared, s3);
    EXPECT_NEAR(full.det + full.lm, full.total.item(), 1e-9);
    if (b.source == SourceKind::image_text) EXPECT_GT(lm, 0.0);
    else EXPECT_EQ(lm, 0.0);
    ++checked;
  }
  EXPECT_GT(checked, 5);
}

TEST(Stages, TrainingIsDeterministic) {
  auto& f = fixture();
  Model a(f.vocab, tiny_config(), 8), b(f.vocab, tiny_config(), 8);
  ASSERT_EQ(a.store.hash(), b.store.hash());
  const auto ra = run_stage(a, quick(1), f.data), rb = run_stage(b, quick(1), f.data);
  EXPECT_EQ(a.store.hash(), b.store.hash());
  ASSERT_EQ(ra.log.size(), rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) EXPECT_EQ(ra.log[i].total, rb.log[i].total);
  EXPECT_EQ(ra.log.size(), 3u);
}

TEST(Stages, TextLearningRateMultiplier) {
  // First Adam step moves every parameter by lr * scale (sign of gradient)
  // when weight decay is off.
  auto& f = fixture();
  auto delta = [&](double mult, const std::string& prefix) {
    Model m(f.vocab, tiny_config(), 9);
    std::map<std::string, std::vector<double>> before;
    for (const auto& [n, t] : m.store.entries()) before[n].assign(t.values().begin(), t.values().end());
    auto cfg = quick(1);
    cfg.max_steps = 1;
    cfg.weight_decay = 0.0;
    cfg.grad_clip = 0.0;
    cfg.lr = 1e-3;
    cfg.text_lr_mult = mult;
    run_stage(m, cfg, f.data);
    double mx = 0.0;
    for (const auto& [n, t] : m.store.entries()) {
      if (n.rfind(prefix, 0) != 0) continue;
      for (std::size_t i = 0; i < t.size(); ++i) mx = std::max(mx, std::abs(t.values()[i] - before[n][i]));
    }
    return mx;
  };
  EXPECT_NEAR(delta(0.1, "text."), 1e-4, 1e-7);
  EXPECT_NEAR(delta(1.0, "text."), 1e-3, 1e-6);
  EXPECT_NEAR(delta(0.1, "det."), 1e-3, 1e-6);
  EXPECT_EQ(delta(0.0, "text."), 0.0);
}

TEST(Stages, UnknownDatasetIsRejected) {
  auto& f = fixture();
  Model m(f.vocab, tiny_config(), 1);
  auto cfg = quick(1);
  cfg.datasets = {"detection", "nope"};
  EXPECT_THROW(run_stage(m, cfg, f.data), std::invalid_argument);
}
