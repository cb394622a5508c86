#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "granudet/concepts.hpp"
#include "granudet/geometry.hpp"
#include "granudet/image.hpp"

namespace granudet {

std::string build_recaption_prompt(std::string_view raw_caption);
std::string build_filter_prompt(std::string_view caption);
std::string build_entity_prompt(std::string_view caption);

// "1. 'phrase', 'category', 'parent category'"
std::string format_entity_line(int id, const EntityTriplet& t);

struct EntityParse {
  std::vector<EntityTriplet> entities;
  int skipped_lines = 0;
  bool none = false;  // the whole response was "None"
};

// Accepts "id. 'a', 'b', 'c'" lines with straight or curly single quotes.
// Blank lines are ignored; anything else that does not parse is counted in
// skipped_lines. Never throws.
EntityParse parse_entity_list(std::string_view text);

bool is_none_response(std::string_view text);

struct InstructionSample {
  std::string question;
  std::string answer;
};

InstructionSample build_instruction_sample(std::string_view raw_caption, std::string_view refined_caption,
                                           std::span<const EntityTriplet> entities);
// Splits an answer back into caption and entities.
std::pair<std::string, EntityParse> parse_instruction_answer(std::string_view answer);

class LlmClient {
 public:
  virtual ~LlmClient() = default;
  virtual std::string generate(const std::string& prompt) = 0;
};

// Canned responses keyed by a hash of the prompt text.
class MockLlmClient : public LlmClient {
 public:
  explicit MockLlmClient(std::string fallback = "None") : fallback_(std::move(fallback)) {}
  static std::string prompt_key(std::string_view prompt);
  void add(std::string_view prompt, std::string response);
  std::string generate(const std::string& prompt) override;

  // {"fallback": "...", "responses": {"<key>": "..."}}
  static MockLlmClient load(const std::string& path);
  void save(const std::string& path) const;
  std::size_t size() const { return table_.size(); }

 private:
  std::map<std::string, std::string> table_;
  std::string fallback_;
};

struct RawPair {
  std::string image_id;
  std::string image_path;
  std::string raw_caption;
};

struct RefinedAnnotation {
  std::string image_id;
  std::string image_path;
  std::string refined_caption;
  std::vector<EntityTriplet> entities;
};

struct AnnotationStats {
  int pairs = 0;
  int filtered_to_none = 0;
  int entities = 0;
  int skipped_lines = 0;
  int invalid_entities = 0;
};

struct AnnotationResult {
  RefinedAnnotation annotation;
  InstructionSample instruction;
};

// Recaption, filter, extract entities.
AnnotationResult annotate_pair(const RawPair& pair, LlmClient& llm, AnnotationStats& stats);

struct PseudoBox {
  Box box;
  EntityTriplet entity;
  double score = 0.0;
};

struct PseudoLabeledSample {
  std::string image_id;
  std::string image_path;
  std::string caption;
  std::vector<PseudoBox> boxes;
};

// Candidate boxes with one probability per query text.
struct ScoredBox {
  Box box;
  std::vector<double> scores;
};

class BoxScorer {
 public:
  virtual ~BoxScorer() = default;
  virtual std::vector<ScoredBox> detect(const Image& image, std::span<const std::string> texts) = 0;
};

struct PseudoLabelStats {
  int images = 0;
  int entities = 0;
  int entities_dropped = 0;
  int boxes = 0;
};

// Queries the scorer with every entity's phrase and category. A box goes to
// the entity owning its best-scoring text when that score >= threshold;
// overlapping survivors are then reduced by class-agnostic NMS.
PseudoLabeledSample assign_pseudo_labels(BoxScorer& scorer, const Image& image, const RefinedAnnotation& ann,
                                         double score_threshold, PseudoLabelStats* stats = nullptr,
                                         double nms_iou = 0.5);

}  // namespace granudet
