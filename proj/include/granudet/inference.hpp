#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "granudet/annotation.hpp"
#include "granudet/captioner.hpp"
#include "granudet/concepts.hpp"
#include "granudet/dataset.hpp"
#include "granudet/geometry.hpp"
#include "granudet/image.hpp"
#include "granudet/model.hpp"

namespace granudet {

// Clamped to [0, 1]; degenerate extents are widened to a minimal box.
Box to_corner_box(std::span<const double> cxcywh);

struct Prediction {
  std::string image_id;
  Box box;
  int query = -1;
  int concept_index = -1;  // into the category list; -1 for generated labels
  double score = 0.0;
  std::optional<GeneratedLabel> label;
};

nlohmann::json to_json(const Prediction& p, std::span<const std::string> categories = {});

// Every query box with its sigmoid score against every category.
struct DetectionScores {
  std::vector<Box> boxes;      // K
  std::vector<double> scores;  // K x C row-major
  int categories = 0;
};

// Categories are embedded and scored in chunks of chunk_size (0 = one
// chunk). Query selection uses the maximum over all chunks, so the result
// is identical for every chunk size.
DetectionScores detection_scores(const Model& model, const Image& image, std::span<const std::string> categories,
                                 int chunk_size);

struct DetectOptions {
  int chunk_size = 40;
  int retain_top = 300;
};

// Per chunk, the retain_top highest (query, category) pairs; union over
// chunks, best first.
std::vector<Prediction> detect(const Model& model, const Image& image, std::span<const std::string> categories,
                               const DetectOptions& opts, const std::string& image_id = "");

// Produces a label for one foreground query.
class ObjectLabeler {
 public:
  virtual ~ObjectLabeler() = default;
  virtual GeneratedLabel label(const nn::Tensor& hidden_row, const nn::Tensor& box_row, const PixelFeatures& pf) = 0;
};

// Greedy decoding with the model's captioner.
class CaptionerLabeler : public ObjectLabeler {
 public:
  CaptionerLabeler(const Model& model, int max_len) : model_(model), max_len_(max_len) {}
  GeneratedLabel label(const nn::Tensor& hidden_row, const nn::Tensor& box_row, const PixelFeatures& pf) override;

 private:
  const Model& model_;
  int max_len_;
};

struct GenerativeOptions {
  int top_k = 100;
  std::size_t corpus_size = 15000;
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  int max_len = 16;
};

// Foreground queries by similarity to the most frequent corpus concepts,
// labelled, re-scored with the recalibrated objectness, thresholded (strictly
// greater) and reduced by class-agnostic NMS.
std::vector<Prediction> generative_detect(const Model& model, const NounCorpus& corpus, const Image& image,
                                          const GenerativeOptions& opts, const std::string& image_id = "",
                                          ObjectLabeler* labeler = nullptr);

struct TaxonomyMatch {
  int index = -1;
  double similarity = 0.0;
};

// Cosine similarity of the label's category field against each class name;
// the best class when its similarity reaches the threshold.
std::optional<TaxonomyMatch> map_generated_to_taxonomy(const GeneratedLabel& label,
                                                       std::span<const std::string> class_names,
                                                       const TextEncoder& text, double sim_threshold = 0.7);
// Same, with class-name embeddings computed once by the caller.
std::optional<TaxonomyMatch> map_generated_to_taxonomy(const GeneratedLabel& label, const nn::Tensor& class_embeddings,
                                                       const TextEncoder& text, double sim_threshold = 0.7);

// ---- metrics ----

struct GroundTruth {
  std::string image_id;
  Box box;
  int label = 0;
  std::string text;  // for dense captioning
};

struct ScoredDetection {
  std::string image_id;
  Box box;
  int label = 0;
  double score = 0.0;
  std::string text;
};

// All-point interpolated AP for one class (labels ignored). Predictions are
// visited by descending score, ties by input order; each takes the unmatched
// ground truth of its image with the highest IoU >= threshold (ties to the
// earlier ground truth). No ground truth gives 0.
double average_precision(std::span<const ScoredDetection> preds, std::span<const GroundTruth> gts, double iou_threshold);

// Mean of per-class AP over the classes in `classes` that have ground truth.
double mean_average_precision(std::span<const ScoredDetection> preds, std::span<const GroundTruth> gts,
                              double iou_threshold, std::span<const int> classes);

// Pool for each class: the retained predictions plus the class's
// min_dets highest-scoring candidates, deduplicated on (image, box, class)
// keeping the higher score. Mean per-class AP over classes with ground truth.
double fixed_ap(std::span<const ScoredDetection> retained, std::span<const ScoredDetection> candidates,
                std::span<const GroundTruth> gts, std::size_t min_dets, double iou_threshold = 0.5);

// Token-level F1 between normalized strings; 1 when both are empty.
double token_f1(std::string_view a, std::string_view b);

inline constexpr double kDenseIouValues[] = {0.3, 0.4, 0.5, 0.6, 0.7};
inline constexpr double kDenseTextValues[] = {0.0, 0.25, 0.5, 0.75, 1.0};

// Class-agnostic AP where a match also needs text similarity >= t_text,
// averaged over the iou x text threshold grid.
double dense_caption_map(std::span<const ScoredDetection> preds, std::span<const GroundTruth> gts,
                         std::span<const double> iou_thresholds = kDenseIouValues,
                         std::span<const double> text_thresholds = kDenseTextValues);

// Every object relabelled with the single concept "object".
SampleRecord to_class_agnostic(const SampleRecord& r);

// Fraction of ground-truth objects covered by a prediction (greedy by score,
// IoU >= iou_threshold, each prediction used once) whose generated triplet
// equals the ground truth exactly.
double exact_triplet_accuracy(std::span<const Prediction> preds, std::span<const SampleRecord> gts,
                              double iou_threshold = 0.5);

// The detector as a pseudo-labelling scorer.
class ModelBoxScorer : public BoxScorer {
 public:
  explicit ModelBoxScorer(const Model& model, int chunk_size = 40) : model_(model), chunk_size_(chunk_size) {}
  std::vector<ScoredBox> detect(const Image& image, std::span<const std::string> texts) override;

 private:
  const Model& model_;
  int chunk_size_;
};

}  // namespace granudet
