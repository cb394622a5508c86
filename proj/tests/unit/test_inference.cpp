#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "granudet/inference.hpp"
#include "granudet/synth.hpp"
#include "oracles.hpp"

using namespace granudet;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.detector.dim = c.text.dim = c.captioner.dim = 16;
  c.detector.heads = c.text.heads = c.captioner.heads = 2;
  c.detector.ffn = c.text.ffn = c.captioner.ffn = 32;
  c.detector.num_queries = 8;
  c.captioner.image_queries = 4;
  c.detector.encoder_layers = c.detector.decoder_layers = 1;
  c.text.layers = c.captioner.layers = 1;
  return c;
}

Model& shared_model() {
  static Model m(Vocabulary::build(all_categories(SyntheticShapesSpec{})), tiny_config(), 5);
  return m;
}

Image random_scene(std::uint64_t seed) {
  Rng rng(seed);
  SyntheticShapesSpec spec;
  return render_scene(spec, all_categories(spec), rng, 3).image;
}

}  // namespace

TEST(Metrics, ApMatchesOracle) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const auto in = oracle::random_metric_instance(rng, 1);
    for (double thr : {0.3, 0.5, 0.75})
      EXPECT_NEAR(average_precision(in.preds, in.gts, thr), oracle::ap(in.preds, in.gts, thr), 1e-12) << t;
  }
}

TEST(Metrics, ApEdgeCases) {
  const std::vector<GroundTruth> g{{"a", {0, 0, 0.5, 0.5}, 0, ""}, {"a", {0.5, 0.5, 1, 1}, 0, ""}};
  EXPECT_DOUBLE_EQ(average_precision({}, g, 0.5), 0.0);
  EXPECT_DOUBLE_EQ(average_precision({}, {}, 0.5), 0.0);
  std::vector<ScoredDetection> perfect{{"a", g[0].box, 0, 0.9, ""}, {"a", g[1].box, 0, 0.8, ""}};
  EXPECT_DOUBLE_EQ(average_precision(perfect, g, 0.5), 1.0);
  // A false positive ranked first: precision 1/2 then 2/3, envelope 2/3.
  perfect.insert(perfect.begin(), {"b", g[0].box, 0, 0.95, ""});
  EXPECT_NEAR(average_precision(perfect, g, 0.5), 2.0 / 3.0, 1e-12);
}

TEST(Metrics, MeanApMatchesPerClassOracle) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    const auto in = oracle::random_metric_instance(rng, 3);
    const std::vector<int> classes{0, 1, 2};
    EXPECT_NEAR(mean_average_precision(in.preds, in.gts, 0.5, classes), oracle::mean_ap(in.preds, in.gts, 0.5, classes), 1e-12);
  }
}

TEST(Metrics, FixedApMatchesOracle) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const auto in = oracle::random_metric_instance(rng, 2);
    // Retained set is a subset; candidates are everything plus rescored copies.
    std::vector<ScoredDetection> retained, candidates = in.preds;
    for (const auto& p : in.preds)
      if (rng.uniform() < 0.5) retained.push_back(p);
    for (const auto& p : in.preds)
      if (rng.uniform() < 0.3) {
        auto q = p;
        q.score = rng.uniform();
        candidates.push_back(q);
      }
    const std::size_t min_dets = rng.below(8);
    EXPECT_NEAR(fixed_ap(retained, candidates, in.gts, min_dets), oracle::fixed_ap(retained, candidates, in.gts, min_dets), 1e-12) << t;
  }
}

TEST(Metrics, FixedApPoolGrowsWithMinDets) {
  // Extra candidates can only add true positives at the tail of a pool that
  // already holds every retained prediction, so recall never drops.
  const std::vector<GroundTruth> g{{"a", {0, 0, 0.5, 0.5}, 0, ""}};
  const std::vector<ScoredDetection> retained{};
  const std::vector<ScoredDetection> cands{{"a", {0.6, 0.6, 0.9, 0.9}, 0, 0.9, ""}, {"a", g[0].box, 0, 0.1, ""}};
  EXPECT_DOUBLE_EQ(fixed_ap(retained, cands, g, 1), 0.0);
  EXPECT_DOUBLE_EQ(fixed_ap(retained, cands, g, 2), 0.5);
}

TEST(Metrics, DenseCaptionMapMatchesOracle) {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const auto in = oracle::random_metric_instance(rng, 1);
    EXPECT_NEAR(dense_caption_map(in.preds, in.gts), oracle::dense_caption_map(in.preds, in.gts), 1e-12) << t;
  }
}

TEST(Metrics, TokenF1) {
  EXPECT_DOUBLE_EQ(token_f1("small red square", "small red square"), 1.0);
  EXPECT_DOUBLE_EQ(token_f1("", ""), 1.0);
  EXPECT_DOUBLE_EQ(token_f1("red", ""), 0.0);
  EXPECT_NEAR(token_f1("small red square", "red square"), 0.8, 1e-12);
  EXPECT_DOUBLE_EQ(token_f1("Red  Square", "red square"), 1.0);
}

TEST(Metrics, ExactTripletAccuracy) {
  const auto a = shape_triplet(false, "red", "square"), b = shape_triplet(true, "blue", "circle");
  SampleRecord r{"im", "x.png", SourceKind::detection, "", {{{0, 0, 0.4, 0.4}, a}, {{0.5, 0.5, 1, 1}, b}}};
  auto pred = [](const Box& box, const EntityTriplet& t, double s) {
    Prediction p;
    p.image_id = "im";
    p.box = box;
    p.score = s;
    p.label = GeneratedLabel{{}, format_object_groundtruth(t), t, 0.0, s};
    return p;
  };
  std::vector<SampleRecord> gts{r};
  EXPECT_DOUBLE_EQ(exact_triplet_accuracy(std::vector<Prediction>{pred(r.objects[0].box, a, 0.9),
                                                                  pred(r.objects[1].box, b, 0.8)},
                                          gts),
                   1.0);
  // Wrong size adjective on one object.
  EXPECT_DOUBLE_EQ(exact_triplet_accuracy(std::vector<Prediction>{pred(r.objects[0].box, a, 0.9),
                                                                  pred(r.objects[1].box, shape_triplet(false, "blue", "circle"), 0.8)},
                                          gts),
                   0.5);
  // A higher-scored wrong label takes the match first.
  EXPECT_DOUBLE_EQ(exact_triplet_accuracy(std::vector<Prediction>{pred(r.objects[0].box, b, 0.95),
                                                                  pred(r.objects[0].box, a, 0.9)},
                                          gts),
                   0.0);
  EXPECT_DOUBLE_EQ(exact_triplet_accuracy(std::vector<Prediction>{}, gts), 0.0);
  const auto agnostic = to_class_agnostic(r);
  for (const auto& o : agnostic.objects) EXPECT_EQ(format_object_groundtruth(o.triplet), "object | object | object");
}

TEST(Inference, CornerBoxClamps) {
  const std::vector<double> c{0.5, 0.5, 2.0, 0.2};
  const Box b = to_corner_box(c);
  EXPECT_DOUBLE_EQ(b.x0, 0.0);
  EXPECT_DOUBLE_EQ(b.x1, 1.0);
  EXPECT_NEAR(b.y0, 0.4, 1e-12);
  const std::vector<double> z{1.2, 0.5, 0.0, 0.0};
  EXPECT_TRUE(to_corner_box(z).valid());
}

TEST(Inference, ChunkedScoresAreExact) {
  const Model& m = shared_model();
  const auto cats = all_categories(SyntheticShapesSpec{});
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Image img = random_scene(s);
    const auto full = detection_scores(m, img, cats, 0);
    for (int chunk : {1, 4, 5}) {
      const auto part = detection_scores(m, img, cats, chunk);
      ASSERT_EQ(part.scores.size(), full.scores.size());
      for (std::size_t i = 0; i < full.scores.size(); ++i) ASSERT_EQ(part.scores[i], full.scores[i]);
      for (std::size_t q = 0; q < full.boxes.size(); ++q) ASSERT_EQ(part.boxes[q].x0, full.boxes[q].x0);
    }
  }
}

TEST(Inference, DetectRetainsTopPerChunk) {
  const Model& m = shared_model();
  std::vector<std::string> cats;
  for (int i = 0; i < 1203; ++i) cats.push_back("concept " + std::to_string(i));
  const Image img = random_scene(9);
  const auto preds = detect(m, img, cats, {40, 1}, "x");
  EXPECT_EQ(preds.size(), 31u);
  std::set<int> chunks;
  for (const auto& p : preds) chunks.insert(p.concept_index / 40);
  EXPECT_EQ(chunks.size(), 31u);
  for (std::size_t i = 1; i < preds.size(); ++i) EXPECT_GE(preds[i - 1].score, preds[i].score);
}

TEST(Inference, DetectPerChunkTopMatchesBruteForce) {
  const Model& m = shared_model();
  const auto cats = all_categories(SyntheticShapesSpec{});
  const Image img = random_scene(3);
  const auto ds = detection_scores(m, img, cats, 0);
  const int k = static_cast<int>(ds.boxes.size()), c = ds.categories;
  const DetectOptions opts{5, 7};
  std::multiset<double> expect;
  for (int b = 0; b < c; b += 5) {
    std::vector<double> chunk;
    for (int q = 0; q < k; ++q)
      for (int j = b; j < std::min(c, b + 5); ++j) chunk.push_back(ds.scores[q * c + j]);
    std::sort(chunk.rbegin(), chunk.rend());
    for (int i = 0; i < 7 && i < static_cast<int>(chunk.size()); ++i) expect.insert(chunk[i]);
  }
  std::multiset<double> got;
  for (const auto& p : detect(m, img, cats, opts)) {
    got.insert(p.score);
    EXPECT_EQ(p.score, ds.scores[p.query * c + p.concept_index]);
  }
  EXPECT_EQ(got, expect);
}

TEST(Inference, TaxonomyMappingMatchesLinearScan) {
  const Model& m = shared_model();
  auto names = all_categories(SyntheticShapesSpec{});
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    GeneratedLabel label;
    const std::string cat = names[rng.below(names.size())];
    label.triplet = make_triplet("x " + cat, t % 2 ? cat : "a " + cat, "thing");
    const auto got = map_generated_to_taxonomy(label, names, m.text, -1.0);
    ASSERT_TRUE(got.has_value());
    nn::NoGradGuard ng;
    const auto e = m.text.encode_one(label.triplet->category);
    const auto all = m.text.encode(names);
    int best = -1;
    double bs = -2;
    for (int c = 0; c < all.rows(); ++c) {
      double s = 0;
      for (int d = 0; d < all.cols(); ++d) s += e(0, d) * all(c, d);
      if (s > bs) {
        bs = s;
        best = c;
      }
    }
    EXPECT_EQ(got->index, best);
    EXPECT_NEAR(got->similarity, bs, 1e-12);
    // Permutation invariance of the chosen name.
    auto shuffled = names;
    rng.shuffle(shuffled);
    const auto again = map_generated_to_taxonomy(label, shuffled, m.text, -1.0);
    EXPECT_EQ(shuffled[again->index], names[got->index]);
    // Above-max threshold rejects.
    EXPECT_FALSE(map_generated_to_taxonomy(label, names, m.text, bs + 1e-9).has_value());
  }
  GeneratedLabel malformed;
  malformed.text = "no separators";
  EXPECT_FALSE(map_generated_to_taxonomy(malformed, names, m.text, -1.0).has_value());
}

namespace {

class FixedLabeler : public ObjectLabeler {
 public:
  GeneratedLabel label(const nn::Tensor&, const nn::Tensor&, const PixelFeatures&) override {
    ++calls;
    const auto t = shape_triplet(calls % 2 == 0, "red", "square");
    return {{}, format_object_groundtruth(t), t, -1.0, 0.0};
  }
  int calls = 0;
};

}  // namespace

TEST(Inference, GenerativeThresholdsNest) {
  const Model& m = shared_model();
  const NounCorpus corpus(std::map<std::string, std::int64_t>{{"red square", 5}, {"blue circle", 3}, {"square", 2}});
  for (std::uint64_t s = 0; s < 4; ++s) {
    const Image img = random_scene(20 + s);
    GenerativeOptions lo;
    lo.top_k = 8;
    lo.score_threshold = 0.0;
    FixedLabeler l1;
    const auto base = generative_detect(m, corpus, img, lo, "im", &l1);
    EXPECT_EQ(l1.calls, 8);
    for (double t : {0.1, 0.3, 0.5, 0.7}) {
      GenerativeOptions o = lo;
      o.score_threshold = t;
      FixedLabeler l2;
      const auto got = generative_detect(m, corpus, img, o, "im", &l2);
      std::vector<double> expect;
      for (const auto& p : base)
        if (p.score > t) expect.push_back(p.score);
      std::vector<double> have;
      for (const auto& p : got) have.push_back(p.score);
      EXPECT_EQ(have, expect) << t;
    }
    GenerativeOptions one = lo;
    one.score_threshold = 1.0;
    FixedLabeler l3;
    EXPECT_TRUE(generative_detect(m, corpus, img, one, "im", &l3).empty());
    GenerativeOptions k1 = lo;
    k1.top_k = 1;
    FixedLabeler l4;
    EXPECT_LE(generative_detect(m, corpus, img, k1, "im", &l4).size(), 1u);
    EXPECT_EQ(l4.calls, 1);
  }
}

TEST(Inference, GenerativeScoresAreRecalibrated) {
  const Model& m = shared_model();
  const NounCorpus corpus(std::map<std::string, std::int64_t>{{"red square", 5}});
  GenerativeOptions o;
  o.top_k = 4;
  o.score_threshold = 0.0;
  o.nms_iou = 1.0;
  FixedLabeler l;
  for (const auto& p : generative_detect(m, corpus, random_scene(40), o, "im", &l)) {
    ASSERT_TRUE(p.label.has_value());
    EXPECT_EQ(p.score, p.label->objectness);
    EXPECT_GT(p.score, 0.0);
    EXPECT_LT(p.score, 1.0);
  }
}

TEST(Inference, CaptionerLabelerProducesText) {
  const Model& m = shared_model();
  nn::NoGradGuard ng;
  const Image img = random_scene(41);
  const PixelFeatures pf = m.detector.encode(img.tensor(), img.height, img.width);
  const nn::Tensor h(1, m.config.detector.dim, 0.1);
  const nn::Tensor box(1, 4, std::vector<double>{0.5, 0.5, 0.2, 0.2});
  CaptionerLabeler labeler(m, 6);
  const GeneratedLabel a = labeler.label(h, box, pf), b = labeler.label(h, box, pf);
  EXPECT_LE(a.tokens.size(), 6u);
  EXPECT_LE(a.logprob, 0.0);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.text, m.vocab.decode(a.tokens));
  // Malformed labels never survive generative detection.
  const NounCorpus corpus(std::map<std::string, std::int64_t>{{"red square", 5}});
  GenerativeOptions o;
  o.top_k = 8;
  o.score_threshold = 0.0;
  o.max_len = 6;
  for (const auto& p : generative_detect(m, corpus, img, o, "im")) {
    ASSERT_TRUE(p.label.has_value());
    EXPECT_FALSE(p.label->malformed());
  }
}
