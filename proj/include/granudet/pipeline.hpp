#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "granudet/annotation.hpp"
#include "granudet/dataset.hpp"
#include "granudet/inference.hpp"
#include "granudet/model.hpp"

namespace granudet {

// raw_pairs.jsonl -> refined.jsonl (+ instructions.jsonl). Image paths are
// rewritten relative to the output directory.
AnnotationStats annotate_file(const std::string& raw_pairs, LlmClient& llm, const std::string& refined_out,
                              const std::string& instructions_out);

// refined.jsonl -> pseudo.jsonl with the model as box scorer.
PseudoLabelStats pseudolabel_file(const std::string& refined, const Model& model, double threshold,
                                  const std::string& pseudo_out, ImageCache* images = nullptr);

// Category-field frequencies of every refined entity.
NounCorpus corpus_from_refined(const std::string& refined, std::int64_t min_frequency = 1);

// Image paths of `records` rewritten so they resolve from `to_dir`.
std::vector<SampleRecord> rebase(std::vector<SampleRecord> records, const std::string& from_dir,
                                 const std::string& to_dir);

struct DetectionReport {
  double ap50 = 0.0;        // mean over eval classes with ground truth
  double fixed_ap50 = 0.0;  // same classes, pooled with min_dets
  std::vector<std::pair<std::string, double>> per_class;
  int images = 0;
};

// Detection with `categories` as the vocabulary; AP over `eval_classes`
// (names that must appear in `categories`; all when empty).
DetectionReport evaluate_detection(const Model& model, const Dataset& data, const std::vector<std::string>& categories,
                                   const std::vector<std::string>& eval_classes, const DetectOptions& opts,
                                   std::size_t min_dets = 50, ImageCache* images = nullptr);

struct GenerativeReport {
  double exact_triplet_accuracy = 0.0;
  double dense_caption_map = 0.0;
  double taxonomy_ap50 = 0.0;  // generated categories mapped onto the class list
  int images = 0;
  int predictions = 0;
  int malformed = 0;
  std::vector<Prediction> all;
};

GenerativeReport evaluate_generative(const Model& model, const NounCorpus& corpus, const Dataset& data,
                                     const std::vector<std::string>& class_names, const GenerativeOptions& opts,
                                     ImageCache* images = nullptr);

nlohmann::json to_json(const DetectionReport& r);
nlohmann::json to_json(const GenerativeReport& r);

// Writes a copy of `image` scaled by `upscale` with each prediction's box and
// "phrase | category | parent" (or category name) drawn on it.
void write_overlay(const Image& image, const std::vector<Prediction>& preds, const std::vector<std::string>& categories,
                   const std::string& path, int upscale = 4);

}  // namespace granudet
