#pragma once

#include <map>
#include <mutex>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "granudet/annotation.hpp"
#include "granudet/concepts.hpp"
#include "granudet/geometry.hpp"
#include "granudet/image.hpp"

namespace granudet {

enum class SourceKind { detection, grounding, image_text };

std::string to_string(SourceKind s);
SourceKind source_from_string(const std::string& s);

struct ObjectAnnotation {
  Box box;
  EntityTriplet triplet;
};

// One training or evaluation image. image_path is relative to the directory
// of the JSON-lines file that holds the record, unless absolute.
struct SampleRecord {
  std::string image_id;
  std::string image_path;
  SourceKind source = SourceKind::detection;
  std::string caption;
  std::vector<ObjectAnnotation> objects;
};

// Positive detector texts for one object: the category for detection data,
// the phrase for grounding data, both for pseudo-labelled image-text data.
std::vector<std::string> positive_texts(SourceKind source, const EntityTriplet& t);

nlohmann::json box_to_json(const Box& b);
Box box_from_json(const nlohmann::json& j);
nlohmann::json triplet_to_json(const EntityTriplet& t);
EntityTriplet triplet_from_json(const nlohmann::json& j);

nlohmann::json to_json(const SampleRecord& r);
SampleRecord sample_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RawPair& r);
RawPair raw_pair_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RefinedAnnotation& r);
RefinedAnnotation refined_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PseudoLabeledSample& r);
PseudoLabeledSample pseudo_from_json(const nlohmann::json& j);
// Pseudo-labelled image-text sample as a training record.
SampleRecord to_sample(const PseudoLabeledSample& p);

std::vector<nlohmann::json> read_jsonl(const std::string& path);
void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& rows);

template <typename T, typename F>
std::vector<T> read_records(const std::string& path, F from_json) {
  std::vector<T> out;
  for (const auto& j : read_jsonl(path)) out.push_back(from_json(j));
  return out;
}

template <typename T>
void write_records(const std::string& path, const std::vector<T>& rows) {
  std::vector<nlohmann::json> js;
  js.reserve(rows.size());
  for (const auto& r : rows) js.push_back(to_json(r));
  write_jsonl(path, js);
}

// `path` resolved against `base_dir` unless absolute.
std::string resolve_path(const std::string& base_dir, const std::string& path);
std::string parent_dir(const std::string& file);

// Records plus the directory their image paths are relative to.
struct Dataset {
  std::string name;
  std::string base_dir;
  std::vector<SampleRecord> records;

  // Rows holding "boxes" are read as pseudo-labelled image-text samples.
  static Dataset load(const std::string& jsonl, std::string name = "");
  std::string image_file(std::size_t i) const { return resolve_path(base_dir, records[i].image_path); }
};

// Decoded images kept as 8-bit RGB; thread-safe.
class ImageCache {
 public:
  Image get(const std::string& path);

 private:
  std::mutex mu_;
  std::map<std::string, std::vector<unsigned char>> cache_;
  std::map<std::string, std::pair<int, int>> shape_;
};

}  // namespace granudet
