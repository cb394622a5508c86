#include "granudet/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <stdexcept>

#include "granudet/nn/tensor.hpp"

namespace granudet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string relocate(const std::string& path, const std::string& from_dir, const std::string& to_dir) {
  if (fs::path(path).is_absolute()) return path;
  const fs::path abs = fs::absolute(fs::path(resolve_path(from_dir, path))).lexically_normal();
  return fs::relative(abs, fs::absolute(to_dir.empty() ? fs::path(".") : fs::path(to_dir))).generic_string();
}

int index_of(std::span<const std::string> names, const std::string& s) {
  const auto it = std::find(names.begin(), names.end(), s);
  return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

Image load(const std::string& path, ImageCache* images) { return images ? images->get(path) : read_image(path); }

}  // namespace

std::vector<SampleRecord> rebase(std::vector<SampleRecord> records, const std::string& from_dir,
                                 const std::string& to_dir) {
  for (auto& r : records) r.image_path = relocate(r.image_path, from_dir, to_dir);
  return records;
}

AnnotationStats annotate_file(const std::string& raw_pairs, LlmClient& llm, const std::string& refined_out,
                              const std::string& instructions_out) {
  const auto pairs = read_records<RawPair>(raw_pairs, raw_pair_from_json);
  const std::string from = parent_dir(raw_pairs), to = parent_dir(refined_out);
  AnnotationStats stats;
  std::vector<RefinedAnnotation> refined;
  std::vector<json> instructions;
  for (const auto& p : pairs) {
    AnnotationResult res = annotate_pair(p, llm, stats);
    res.annotation.image_path = relocate(p.image_path, from, to);
    refined.push_back(std::move(res.annotation));
    instructions.push_back({{"image_id", p.image_id}, {"question", res.instruction.question},
                            {"answer", res.instruction.answer}});
  }
  write_records(refined_out, refined);
  if (!instructions_out.empty()) write_jsonl(instructions_out, instructions);
  return stats;
}

PseudoLabelStats pseudolabel_file(const std::string& refined, const Model& model, double threshold,
                                  const std::string& pseudo_out, ImageCache* images) {
  const auto anns = read_records<RefinedAnnotation>(refined, refined_from_json);
  const std::string from = parent_dir(refined), to = parent_dir(pseudo_out);
  ModelBoxScorer scorer(model);
  PseudoLabelStats stats;
  std::vector<PseudoLabeledSample> out;
  for (const auto& a : anns) {
    const Image img = load(resolve_path(from, a.image_path), images);
    PseudoLabeledSample s = assign_pseudo_labels(scorer, img, a, threshold, &stats);
    s.image_path = relocate(a.image_path, from, to);
    out.push_back(std::move(s));
  }
  write_records(pseudo_out, out);
  return stats;
}

NounCorpus corpus_from_refined(const std::string& refined, std::int64_t min_frequency) {
  std::vector<EntityTriplet> all;
  for (const auto& a : read_records<RefinedAnnotation>(refined, refined_from_json))
    all.insert(all.end(), a.entities.begin(), a.entities.end());
  return build_corpus(all, min_frequency);
}

DetectionReport evaluate_detection(const Model& model, const Dataset& data, const std::vector<std::string>& categories,
                                   const std::vector<std::string>& eval_classes, const DetectOptions& opts,
                                   std::size_t min_dets, ImageCache* images) {
  std::vector<int> classes;
  if (eval_classes.empty()) {
    for (std::size_t c = 0; c < categories.size(); ++c) classes.push_back(static_cast<int>(c));
  } else {
    for (const auto& n : eval_classes) {
      const int c = index_of(categories, n);
      if (c < 0) throw std::invalid_argument("eval class not in category list: " + n);
      classes.push_back(c);
    }
  }
  auto wanted = [&](int c) { return std::find(classes.begin(), classes.end(), c) != classes.end(); };

  std::vector<GroundTruth> gts;
  std::vector<ScoredDetection> retained, candidates;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const auto& r = data.records[i];
    for (const auto& o : r.objects) {
      const int c = index_of(categories, o.triplet.category);
      if (c >= 0 && wanted(c)) gts.push_back({r.image_id, o.box, c, o.triplet.phrase});
    }
    const Image img = load(data.image_file(i), images);
    for (const auto& p : detect(model, img, categories, opts, r.image_id))
      if (wanted(p.concept_index)) retained.push_back({r.image_id, p.box, p.concept_index, p.score, ""});
    const DetectionScores ds = detection_scores(model, img, categories, opts.chunk_size);
    for (std::size_t q = 0; q < ds.boxes.size(); ++q)
      for (int c : classes)
        candidates.push_back({r.image_id, ds.boxes[q], c, ds.scores[q * ds.categories + c], ""});
  }

  DetectionReport rep;
  rep.images = static_cast<int>(data.records.size());
  rep.ap50 = mean_average_precision(retained, gts, 0.5, classes);
  rep.fixed_ap50 = fixed_ap(retained, candidates, gts, min_dets, 0.5);
  for (int c : classes) {
    std::vector<ScoredDetection> p;
    std::vector<GroundTruth> g;
    for (const auto& d : retained)
      if (d.label == c) p.push_back(d);
    for (const auto& t : gts)
      if (t.label == c) g.push_back(t);
    if (!g.empty()) rep.per_class.emplace_back(categories[c], average_precision(p, g, 0.5));
  }
  return rep;
}

GenerativeReport evaluate_generative(const Model& model, const NounCorpus& corpus, const Dataset& data,
                                     const std::vector<std::string>& class_names, const GenerativeOptions& opts,
                                     ImageCache* images) {
  GenerativeReport rep;
  rep.images = static_cast<int>(data.records.size());
  nn::Tensor class_emb;
  {
    nn::NoGradGuard ng;
    if (!class_names.empty()) class_emb = model.text.encode(class_names);
  }
  std::vector<GroundTruth> dense_gt, tax_gt;
  std::vector<ScoredDetection> dense_pred, tax_pred;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const auto& r = data.records[i];
    for (const auto& o : r.objects) {
      dense_gt.push_back({r.image_id, o.box, 0, o.triplet.phrase});
      const int c = index_of(class_names, o.triplet.category);
      if (c >= 0) tax_gt.push_back({r.image_id, o.box, c, ""});
    }
    const Image img = load(data.image_file(i), images);
    auto preds = generative_detect(model, corpus, img, opts, r.image_id);
    for (const auto& p : preds) {
      if (!p.label) continue;
      if (p.label->malformed()) ++rep.malformed;
      dense_pred.push_back({r.image_id, p.box, 0, p.score, p.label->triplet ? p.label->triplet->phrase : p.label->text});
      if (class_names.empty()) continue;
      if (const auto m = map_generated_to_taxonomy(*p.label, class_emb, model.text))
        tax_pred.push_back({r.image_id, p.box, m->index, p.score, ""});
    }
    rep.predictions += static_cast<int>(preds.size());
    rep.all.insert(rep.all.end(), preds.begin(), preds.end());
  }
  rep.exact_triplet_accuracy = exact_triplet_accuracy(rep.all, data.records);
  rep.dense_caption_map = dense_caption_map(dense_pred, dense_gt);
  if (!class_names.empty()) {
    std::vector<int> classes(class_names.size());
    for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = static_cast<int>(c);
    rep.taxonomy_ap50 = mean_average_precision(tax_pred, tax_gt, 0.5, classes);
  }
  return rep;
}

json to_json(const DetectionReport& r) {
  json per = json::object();
  for (const auto& [n, ap] : r.per_class) per[n] = ap;
  return {{"ap50", r.ap50}, {"fixed_ap50", r.fixed_ap50}, {"per_class_ap50", per}, {"images", r.images}};
}

json to_json(const GenerativeReport& r) {
  return {{"exact_triplet_accuracy", r.exact_triplet_accuracy},
          {"dense_caption_map", r.dense_caption_map},
          {"taxonomy_ap50", r.taxonomy_ap50},
          {"images", r.images},
          {"predictions", r.predictions},
          {"malformed", r.malformed}};
}

void write_overlay(const Image& image, const std::vector<Prediction>& preds, const std::vector<std::string>& categories,
                   const std::string& path, int upscale) {
  cv::Mat m(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c)
        m.at<cv::Vec3b>(y, x)[2 - c] = cv::saturate_cast<unsigned char>(image.at(y, x, c) * 255.0);
  cv::Mat big;
  cv::resize(m, big, cv::Size(image.width * upscale, image.height * upscale), 0, 0, cv::INTER_NEAREST);
  const double w = big.cols, h = big.rows;
  for (const auto& p : preds) {
    const cv::Point a(static_cast<int>(p.box.x0 * w), static_cast<int>(p.box.y0 * h));
    const cv::Point b(static_cast<int>(p.box.x1 * w) - 1, static_cast<int>(p.box.y1 * h) - 1);
    cv::rectangle(big, a, b, cv::Scalar(255, 255, 255), 1);
    std::string text;
    if (p.label)
      text = p.label->triplet ? format_object_groundtruth(*p.label->triplet) : p.label->text;
    else if (p.concept_index >= 0 && p.concept_index < static_cast<int>(categories.size()))
      text = categories[p.concept_index];
    text += " " + std::to_string(p.score).substr(0, 4);
    cv::putText(big, text, cv::Point(a.x + 1, std::max(8, a.y - 2)), cv::FONT_HERSHEY_PLAIN, 0.6,
                cv::Scalar(255, 255, 255), 1);
  }
  if (const auto dir = parent_dir(path); !dir.empty()) fs::create_directories(dir);
  if (!cv::imwrite(path, big)) throw std::runtime_error("cannot write " + path);
}

}  // namespace granudet
