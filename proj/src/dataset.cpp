#include "granudet/dataset.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace granudet {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(SourceKind s) {
  switch (s) {
    case SourceKind::detection:
      return "detection";
    case SourceKind::grounding:
      return "grounding";
    case SourceKind::image_text:
      return "image_text";
  }
  return "detection";
}

SourceKind source_from_string(const std::string& s) {
  if (s == "detection") return SourceKind::detection;
  if (s == "grounding") return SourceKind::grounding;
  if (s == "image_text") return SourceKind::image_text;
  throw std::invalid_argument("unknown source kind: " + s);
}

std::vector<std::string> positive_texts(SourceKind source, const EntityTriplet& t) {
  switch (source) {
    case SourceKind::detection:
      return {t.category};
    case SourceKind::grounding:
      return {t.phrase};
    case SourceKind::image_text:
      break;
  }
  const auto [phrase, category] = detector_text_label(t);
  if (phrase == category) return {phrase};
  return {phrase, category};
}

json box_to_json(const Box& b) { return json::array({b.x0, b.y0, b.x1, b.y1}); }

Box box_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 4) throw std::invalid_argument("box needs 4 numbers");
  Box b{v[0], v[1], v[2], v[3]};
  if (!b.valid()) throw std::invalid_argument("invalid box");
  return b;
}

json triplet_to_json(const EntityTriplet& t) {
  return {{"phrase", t.phrase}, {"category", t.category}, {"parent", t.parent_category}};
}

EntityTriplet triplet_from_json(const json& j) {
  return make_triplet(j.at("phrase").get<std::string>(), j.at("category").get<std::string>(),
                      j.at("parent").get<std::string>());
}

json to_json(const SampleRecord& r) {
  json objects = json::array();
  for (const auto& o : r.objects) {
    json e = triplet_to_json(o.triplet);
    e["box"] = box_to_json(o.box);
    objects.push_back(e);
  }
  return {{"image_id", r.image_id}, {"image", r.image_path}, {"source", to_string(r.source)},
          {"caption", r.caption},   {"objects", objects}};
}

SampleRecord sample_from_json(const json& j) {
  SampleRecord r;
  r.image_id = j.at("image_id").get<std::string>();
  r.image_path = j.at("image").get<std::string>();
  r.source = source_from_string(j.value("source", std::string("detection")));
  r.caption = j.value("caption", std::string());
  for (const auto& o : j.value("objects", json::array())) r.objects.push_back({box_from_json(o.at("box")), triplet_from_json(o)});
  return r;
}

json to_json(const RawPair& r) { return {{"image_id", r.image_id}, {"image", r.image_path}, {"caption", r.raw_caption}}; }

RawPair raw_pair_from_json(const json& j) {
  return {j.at("image_id").get<std::string>(), j.at("image").get<std::string>(), j.at("caption").get<std::string>()};
}

json to_json(const RefinedAnnotation& r) {
  json ents = json::array();
  for (const auto& e : r.entities) ents.push_back(triplet_to_json(e));
  return {{"image_id", r.image_id}, {"image", r.image_path}, {"caption", r.refined_caption}, {"entities", ents}};
}

RefinedAnnotation refined_from_json(const json& j) {
  RefinedAnnotation r;
  r.image_id = j.at("image_id").get<std::string>();
  r.image_path = j.at("image").get<std::string>();
  r.refined_caption = j.value("caption", std::string());
  for (const auto& e : j.value("entities", json::array())) r.entities.push_back(triplet_from_json(e));
  return r;
}

json to_json(const PseudoLabeledSample& r) {
  json boxes = json::array();
  for (const auto& b : r.boxes) {
    json e = triplet_to_json(b.entity);
    e["box"] = box_to_json(b.box);
    e["score"] = b.score;
    boxes.push_back(e);
  }
  return {{"image_id", r.image_id}, {"image", r.image_path}, {"caption", r.caption}, {"boxes", boxes}};
}

PseudoLabeledSample pseudo_from_json(const json& j) {
  PseudoLabeledSample r;
  r.image_id = j.at("image_id").get<std::string>();
  r.image_path = j.at("image").get<std::string>();
  r.caption = j.value("caption", std::string());
  for (const auto& b : j.value("boxes", json::array()))
    r.boxes.push_back({box_from_json(b.at("box")), triplet_from_json(b), b.at("score").get<double>()});
  return r;
}

SampleRecord to_sample(const PseudoLabeledSample& p) {
  SampleRecord r{p.image_id, p.image_path, SourceKind::image_text, p.caption, {}};
  for (const auto& b : p.boxes) r.objects.push_back({b.box, b.entity});
  return r;
}

std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::vector<json> rows;
  std::string line;
  int n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

void write_jsonl(const std::string& path, const std::vector<json>& rows) {
  const auto dir = fs::path(path).parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  for (const auto& r : rows) f << r.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
}

std::string resolve_path(const std::string& base_dir, const std::string& path) {
  if (fs::path(path).is_absolute() || base_dir.empty()) return path;
  return (fs::path(base_dir) / path).string();
}

std::string parent_dir(const std::string& file) { return fs::path(file).parent_path().string(); }

Dataset Dataset::load(const std::string& jsonl, std::string name) {
  Dataset d;
  d.name = name.empty() ? fs::path(jsonl).stem().string() : std::move(name);
  d.base_dir = parent_dir(jsonl);
  for (const auto& j : read_jsonl(jsonl))
    d.records.push_back(j.contains("boxes") ? to_sample(pseudo_from_json(j)) : sample_from_json(j));
  return d;
}

Image ImageCache::get(const std::string& path) {
  std::unique_lock lock(mu_);
  auto it = cache_.find(path);
  if (it == cache_.end()) {
    lock.unlock();
    const Image img = read_image(path);
    std::vector<unsigned char> bytes(img.rgb.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<unsigned char>(std::lround(img.rgb[i] * 255.0));
    lock.lock();
    shape_[path] = {img.height, img.width};
    it = cache_.emplace(path, std::move(bytes)).first;
  }
  const auto [h, w] = shape_.at(path);
  Image out(h, w);
  for (std::size_t i = 0; i < out.rgb.size(); ++i) out.rgb[i] = it->second[i] / 255.0;
  return out;
}

}  // namespace granudet
