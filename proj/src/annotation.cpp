#include "granudet/annotation.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <regex>
#include <stdexcept>

namespace granudet {

namespace {

const char* const kRecaptionHead = "Given a noisy caption of the image: ";
const char* const kRecaptionTail = ", write a detailed clean description of the image.";

const char* const kFilterHead = "Here is a caption for an image: ";
const char* const kFilterTail =
    ". Extract the part of factual description related to what is directly observable in the image, while filtering "
    "out the parts that refer to inferred contents, description of atmosphere/appearance/style and introduction of "
    "history/culture/brand etc. Return solely the result without any other contents. If you think there is no "
    "factual description, just return 'None'.";

const char* const kEntityHead =
    "You are an AI tasked with developing an open-set object detection dataset from a large number of image "
    "captions, without access to the actual images. Your mission is to accurately identify and extract 'objects' "
    "from these captions, following the principles below:\n"
    "1. 'Objects' are physically tangible: They must be concrete entities that can be visually represented in an "
    "image. They are NOT (1) abstract  concepts (like 'history', 'culture') or feelings (like 'sorrow', "
    "'happiness'), (2) meta-references to the image itself (e.g., 'image', 'picture', 'photo') or the camera (e.g. "
    "something is facing the 'camera'), unless they are specifically referring to physical elements within the "
    "image. (3) any descriptors (like 'appearance', 'atmosphere', 'color'), (4) events/activities and processes "
    "(like 'game', 'presentation', 'performance') and specific event types (like 'country style wedding', 'film "
    "festival'), (5) compositional aspects (like 'perspective', 'focus', 'composition') or viewpoint/perspective "
    "(like 'bird's eye view').\n"
    "2. 'Objects' are visually distinct: They are standalone entities that can be visually isolated from their "
    "environment. They do not include environmental characteristics (like 'colorful environment') and general "
    "location/scene descriptors (e.g., 'scene set indoors', 'country setting', 'sunny day', 'black and white "
    "illustration')\n"
    "Adhere to these guidelines for the extraction process:\n"
    "1. Consolidate duplicates: If multiple extracted 'objects' refer to the same entity in the caption, merge them "
    "into one while retaining conceptual diversity.\n"
    "2. Categorize the descriptive variants: For 'objects' described with adjectives, provide both versions - with "
    "and without the adjective.\n"
    "3. Identify the broader category: Assign a 'parent category' that each 'object' belongs to.\n"
    "Present your results as a numbered list in this format: id. 'object with adjective', 'object without "
    "adjective', 'parent category'. Your response should consist exclusively of results, with no superfluous "
    "content.\n"
    "Here's the caption: ";

const char* const kInstructionHead = "From the noisy caption of the image: ";
const char* const kInstructionTail =
    ", generate a refined image description and identify all visible 'objects' -- any visually and physically "
    "identifiable entity in the image. Keep the following guidelines in mind:\n"
    "1. Merge similar 'objects' from the caption, preserving conceptual diversity.\n"
    "2. For adjective-described 'objects', provide versions both with and without the adjective.\n"
    "3. Assign a 'parent category' for each 'object'.\n"
    "Present results as:\n"
    "Caption: {caption}\n"
    "Objects: {id. 'object with adjective', 'object without adjective', 'parent category'}.\n"
    "<image tokens>";

// Straight, left and right single quotes.
const std::string kQuote = "(?:'|\xE2\x80\x98|\xE2\x80\x99)";

const std::regex& line_pattern() {
  static const std::regex re("^(\\d+)\\s*[.)]\\s*" + kQuote + "(.*?)" + kQuote + "\\s*,\\s*" + kQuote + "(.*?)" +
                             kQuote + "\\s*,\\s*" + kQuote + "(.*?)" + kQuote + "\\s*[.,;]?$");
  return re;
}

const std::regex& separator_pattern() {
  static const std::regex re(kQuote + "\\s*,\\s*" + kQuote);
  return re;
}

const std::regex& edge_quote_pattern() {
  static const std::regex re("^" + kQuote + "|" + kQuote + "$");
  return re;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Fields that could not survive a serialize/parse round trip.
bool ambiguous_field(const std::string& f) {
  return std::regex_search(f, separator_pattern()) || std::regex_search(f, edge_quote_pattern());
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::string build_recaption_prompt(std::string_view raw_caption) {
  return kRecaptionHead + std::string(raw_caption) + kRecaptionTail;
}

std::string build_filter_prompt(std::string_view caption) { return kFilterHead + std::string(caption) + kFilterTail; }

std::string build_entity_prompt(std::string_view caption) { return kEntityHead + std::string(caption); }

std::string format_entity_line(int id, const EntityTriplet& t) {
  return std::to_string(id) + ". '" + t.phrase + "', '" + t.category + "', '" + t.parent_category + "'";
}

bool is_none_response(std::string_view text) {
  std::string s = trim(text);
  if (!s.empty() && s.back() == '.') s.pop_back();
  s = std::regex_replace(s, std::regex("^" + kQuote + "|" + kQuote + "$|^\"|\"$"), "");
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s == "none";
}

EntityParse parse_entity_list(std::string_view text) {
  EntityParse out;
  if (is_none_response(text)) {
    out.none = true;
    return out;
  }
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string line = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    if (line.empty()) continue;
    std::smatch m;
    if (!std::regex_match(line, m, line_pattern())) {
      ++out.skipped_lines;
      continue;
    }
    try {
      const auto t = make_triplet(m[2].str(), m[3].str(), m[4].str());
      if (ambiguous_field(t.phrase) || ambiguous_field(t.category) || ambiguous_field(t.parent_category)) {
        ++out.skipped_lines;
        continue;
      }
      out.entities.push_back(t);
    } catch (const std::invalid_argument&) {
      ++out.skipped_lines;
    }
  }
  return out;
}

InstructionSample build_instruction_sample(std::string_view raw_caption, std::string_view refined_caption,
                                           std::span<const EntityTriplet> entities) {
  InstructionSample s;
  s.question = kInstructionHead + std::string(raw_caption) + kInstructionTail;
  s.answer = "Caption: " + std::string(refined_caption) + "\nObjects:";
  for (std::size_t i = 0; i < entities.size(); ++i)
    s.answer += (i == 0 ? " " : "\n") + format_entity_line(static_cast<int>(i + 1), entities[i]);
  return s;
}

std::pair<std::string, EntityParse> parse_instruction_answer(std::string_view answer) {
  const std::string_view head = "Caption: ";
  const std::string_view marker = "\nObjects:";
  const auto at = answer.rfind(marker);
  if (answer.substr(0, head.size()) != head || at == std::string_view::npos) {
    EntityParse bad;
    bad.skipped_lines = 1;
    return {std::string(), bad};
  }
  return {std::string(answer.substr(head.size(), at - head.size())),
          parse_entity_list(answer.substr(at + marker.size()))};
}

std::string MockLlmClient::prompt_key(std::string_view prompt) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(prompt)));
  return buf;
}

void MockLlmClient::add(std::string_view prompt, std::string response) {
  table_[prompt_key(prompt)] = std::move(response);
}

std::string MockLlmClient::generate(const std::string& prompt) {
  auto it = table_.find(prompt_key(prompt));
  return it == table_.end() ? fallback_ : it->second;
}

MockLlmClient MockLlmClient::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read LLM response table: " + path);
  const auto j = nlohmann::json::parse(f);
  MockLlmClient c(j.value("fallback", std::string("None")));
  for (const auto& [k, v] : j.at("responses").items()) c.table_[k] = v.get<std::string>();
  return c;
}

void MockLlmClient::save(const std::string& path) const {
  nlohmann::json j;
  j["fallback"] = fallback_;
  j["responses"] = table_;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write LLM response table: " + path);
  f << j.dump(1) << '\n';
}

AnnotationResult annotate_pair(const RawPair& pair, LlmClient& llm, AnnotationStats& stats) {
  ++stats.pairs;
  AnnotationResult r;
  r.annotation.image_id = pair.image_id;
  r.annotation.image_path = pair.image_path;
  const std::string refined = trim(llm.generate(build_recaption_prompt(pair.raw_caption)));
  const std::string filtered = trim(llm.generate(build_filter_prompt(refined)));
  if (is_none_response(filtered)) {
    ++stats.filtered_to_none;
    r.annotation.refined_caption = refined;
  } else {
    r.annotation.refined_caption = filtered;
    const auto parsed = parse_entity_list(llm.generate(build_entity_prompt(filtered)));
    stats.skipped_lines += parsed.skipped_lines;
    // Consolidate exact duplicates, keep first occurrence.
    for (const auto& e : parsed.entities)
      if (std::find(r.annotation.entities.begin(), r.annotation.entities.end(), e) == r.annotation.entities.end())
        r.annotation.entities.push_back(e);
  }
  stats.entities += static_cast<int>(r.annotation.entities.size());
  r.instruction = build_instruction_sample(pair.raw_caption, r.annotation.refined_caption, r.annotation.entities);
  return r;
}

PseudoLabeledSample assign_pseudo_labels(BoxScorer& scorer, const Image& image, const RefinedAnnotation& ann,
                                         double score_threshold, PseudoLabelStats* stats, double nms_iou) {
  if (!(score_threshold > 0.0 && score_threshold <= 1.0))
    throw std::invalid_argument("assign_pseudo_labels: threshold must be in (0, 1]");
  PseudoLabeledSample out;
  out.image_id = ann.image_id;
  out.image_path = ann.image_path;
  out.caption = ann.refined_caption;
  std::vector<std::string> texts;
  for (const auto& e : ann.entities) {
    texts.push_back(e.phrase);
    texts.push_back(e.category);
  }
  std::vector<PseudoBox> kept;
  if (!texts.empty()) {
    for (const auto& sb : scorer.detect(image, texts)) {
      if (sb.scores.size() != texts.size()) throw std::runtime_error("assign_pseudo_labels: scorer returned wrong width");
      const auto best = std::max_element(sb.scores.begin(), sb.scores.end()) - sb.scores.begin();
      if (sb.scores[best] >= score_threshold) kept.push_back({sb.box, ann.entities[best / 2], sb.scores[best]});
    }
  }
  std::vector<Box> boxes;
  std::vector<double> scores;
  for (const auto& k : kept) {
    boxes.push_back(k.box);
    scores.push_back(k.score);
  }
  for (int i : class_agnostic_nms(boxes, scores, nms_iou)) out.boxes.push_back(kept[i]);
  if (stats) {
    ++stats->images;
    stats->entities += static_cast<int>(ann.entities.size());
    for (const auto& e : ann.entities)
      if (std::none_of(out.boxes.begin(), out.boxes.end(), [&](const PseudoBox& b) { return b.entity == e; }))
        ++stats->entities_dropped;
    stats->boxes += static_cast<int>(out.boxes.size());
  }
  return out;
}

}  // namespace granudet
