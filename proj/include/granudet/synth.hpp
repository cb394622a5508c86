#pragma once

#include <array>
#include <cstdint>
#include <json.hpp>
#include <string>
#include <utility>
#include <vector>

#include "granudet/dataset.hpp"
#include "granudet/rng.hpp"

namespace granudet {

// Coloured shapes on a noisy grey canvas. A shape instance is labelled
// "small red square" / "red square" / "square".
struct SyntheticShapesSpec {
  int canvas = 64;
  std::vector<std::string> colors{"red", "green", "blue", "yellow"};
  std::vector<std::string> shapes{"square", "circle", "triangle"};
  std::pair<int, int> small_px{10, 14};
  std::pair<int, int> large_px{20, 28};
  int min_objects = 1;
  int max_objects = 3;
  std::vector<std::string> held_out{"green triangle", "blue square"};
  int detection_images = 1200;
  int grounding_images = 600;
  int image_text_images = 1200;
  int val_heldout_images = 100;
  int val_images = 100;
  double none_fraction = 0.05;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const SyntheticShapesSpec& s);
SyntheticShapesSpec synth_spec_from_json(const nlohmann::json& j);

std::array<double, 3> color_rgb(const std::string& color);
std::vector<std::string> all_categories(const SyntheticShapesSpec& spec);
std::vector<std::string> training_categories(const SyntheticShapesSpec& spec);
EntityTriplet shape_triplet(bool large, const std::string& color, const std::string& shape);

struct RenderedScene {
  Image image;
  std::vector<ObjectAnnotation> objects;
};

// Draws between min_objects and max_objects shapes (fewer when placement
// fails) whose categories are drawn from `categories`. `required`, when
// non-empty, is drawn first. Boxes are the exact pixel extent of each shape.
RenderedScene render_scene(const SyntheticShapesSpec& spec, const std::vector<std::string>& categories, Rng& rng,
                           int object_count, const std::string& required = "");

// Text the mock LLM returns for a scene.
struct SceneTexts {
  std::string raw_caption;
  std::string refined;
  std::string filtered;  // "None" when nothing factual remains
  std::string entities;
};
SceneTexts scene_texts(const std::vector<ObjectAnnotation>& objects, const std::string& image_id, Rng& rng);

struct SynthOutput {
  std::string detection;    // detection.jsonl
  std::string grounding;    // grounding.jsonl
  std::string raw_pairs;    // raw_pairs.jsonl
  std::string llm_table;    // llm_table.json
  std::string val_heldout;  // val_heldout.jsonl
  std::string val;          // val.jsonl
};

SynthOutput synth_paths(const std::string& dir);

// Renders every split and the mock LLM table into `dir`. Output bytes depend
// only on the spec.
SynthOutput generate_synthetic(const SyntheticShapesSpec& spec, const std::string& dir);

}  // namespace granudet
