#include "granudet/synth.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace granudet {

namespace fs = std::filesystem;
using nlohmann::json;

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticShapesSpec, canvas, colors, shapes, small_px, large_px,
                                                min_objects, max_objects, held_out, detection_images,
                                                grounding_images, image_text_images, val_heldout_images, val_images,
                                                none_fraction, seed)

json to_json(const SyntheticShapesSpec& s) {
  json j;
  granudet::to_json(j, s);
  return j;
}

SyntheticShapesSpec synth_spec_from_json(const json& j) {
  const json known = to_json(SyntheticShapesSpec{});
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw std::invalid_argument("unknown synth key: " + k);
  auto s = j.get<SyntheticShapesSpec>();
  const auto all = all_categories(s);
  for (const auto& h : s.held_out)
    if (std::find(all.begin(), all.end(), h) == all.end()) throw std::invalid_argument("held-out category not in grid: " + h);
  if (s.min_objects < 0 || s.max_objects < s.min_objects) throw std::invalid_argument("bad object count range");
  return s;
}

std::array<double, 3> color_rgb(const std::string& color) {
  if (color == "red") return {0.90, 0.12, 0.10};
  if (color == "green") return {0.12, 0.75, 0.15};
  if (color == "blue") return {0.10, 0.25, 0.90};
  if (color == "yellow") return {0.95, 0.88, 0.10};
  if (color == "purple") return {0.60, 0.15, 0.75};
  if (color == "orange") return {0.98, 0.55, 0.08};
  throw std::invalid_argument("unknown color: " + color);
}

std::vector<std::string> all_categories(const SyntheticShapesSpec& spec) {
  std::vector<std::string> out;
  for (const auto& c : spec.colors)
    for (const auto& s : spec.shapes) out.push_back(c + " " + s);
  return out;
}

std::vector<std::string> training_categories(const SyntheticShapesSpec& spec) {
  std::vector<std::string> out;
  for (const auto& c : all_categories(spec))
    if (std::find(spec.held_out.begin(), spec.held_out.end(), c) == spec.held_out.end()) out.push_back(c);
  return out;
}

EntityTriplet shape_triplet(bool large, const std::string& color, const std::string& shape) {
  return make_triplet(std::string(large ? "large " : "small ") + color + " " + shape, color + " " + shape, shape);
}

namespace {

bool inside(const std::string& shape, double px, double py, int x, int y, int s) {
  if (shape == "square") return true;
  if (shape == "circle") {
    const double r = s / 2.0, dx = px - (x + r), dy = py - (y + r);
    return dx * dx + dy * dy <= r * r;
  }
  if (shape == "triangle") {
    // Apex at top centre, base along the bottom edge.
    const double t = (py - y) / s;
    const double half = 0.5 * s * t;
    return std::abs(px - (x + 0.5 * s)) <= half;
  }
  throw std::invalid_argument("unknown shape: " + shape);
}

std::pair<std::string, std::string> split_category(const std::string& category) {
  const auto sp = category.find(' ');
  return {category.substr(0, sp), category.substr(sp + 1)};
}

std::string join_phrases(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += i + 1 == items.size() ? " and " : ", ";
    out += "a " + items[i];
  }
  return out;
}

}  // namespace

RenderedScene render_scene(const SyntheticShapesSpec& spec, const std::vector<std::string>& categories, Rng& rng,
                           int object_count, const std::string& required) {
  const int n = spec.canvas;
  RenderedScene scene;
  scene.image = Image(n, n);
  const double base = rng.uniform(0.4, 0.6);
  for (double& v : scene.image.rgb) v = std::clamp(base + 0.02 * rng.normal(), 0.0, 1.0);
  std::vector<Box> taken;
  for (int k = 0; k < object_count; ++k) {
    const std::string category = k == 0 && !required.empty() ? required : categories[rng.below(categories.size())];
    const auto [color, shape] = split_category(category);
    const bool large = rng.below(2) == 1;
    const auto [lo, hi] = large ? spec.large_px : spec.small_px;
    const int s = rng.uniform_int(lo, hi);
    if (s > n) continue;
    bool placed = false;
    int x = 0, y = 0;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      x = rng.uniform_int(0, n - s);
      y = rng.uniform_int(0, n - s);
      const Box cand{(x - 1.0) / n, (y - 1.0) / n, (x + s + 1.0) / n, (y + s + 1.0) / n};
      placed = std::none_of(taken.begin(), taken.end(), [&](const Box& b) {
        return cand.x0 < b.x1 && b.x0 < cand.x1 && cand.y0 < b.y1 && b.y0 < cand.y1;
      });
    }
    if (!placed) continue;
    auto rgb = color_rgb(color);
    for (double& c : rgb) c = std::clamp(c + rng.uniform(-0.05, 0.05), 0.0, 1.0);
    int x0 = n, y0 = n, x1 = -1, y1 = -1;
    for (int py = y; py < y + s; ++py)
      for (int px = x; px < x + s; ++px) {
        if (!inside(shape, px + 0.5, py + 0.5, x, y, s)) continue;
        for (int c = 0; c < 3; ++c) scene.image.at(py, px, c) = rgb[c];
        x0 = std::min(x0, px);
        y0 = std::min(y0, py);
        x1 = std::max(x1, px);
        y1 = std::max(y1, py);
      }
    const Box box{static_cast<double>(x0) / n, static_cast<double>(y0) / n, (x1 + 1.0) / n, (y1 + 1.0) / n};
    taken.push_back(box);
    scene.objects.push_back({box, shape_triplet(large, color, shape)});
  }
  return scene;
}

SceneTexts scene_texts(const std::vector<ObjectAnnotation>& objects, const std::string& image_id, Rng& rng) {
  SceneTexts t;
  if (objects.empty()) {
    static const char* const kAbstract[] = {"abstract backdrop", "minimal wallpaper", "calm texture"};
    const std::string what = kAbstract[rng.below(3)];
    t.raw_caption = what + " " + image_id;
    t.refined = "A soft " + what + " that evokes a peaceful mood.";
    t.filtered = "None";
    return t;
  }
  std::vector<std::string> phrases;
  std::vector<EntityTriplet> unique;
  for (const auto& o : objects) {
    phrases.push_back(o.triplet.phrase);
    if (std::find(unique.begin(), unique.end(), o.triplet) == unique.end()) unique.push_back(o.triplet);
  }
  std::string tags;
  for (const auto& p : phrases) tags += (tags.empty() ? "" : " + ") + p;
  static const char* const kRaw[] = {"stock clipart: ", "IMG ", "shapes pack - ", ""};
  t.raw_caption = kRaw[rng.below(4)] + tags + " #" + image_id;
  t.filtered = "An image of " + join_phrases(phrases) + " on a grey background.";
  static const char* const kMood[] = {" The style feels playful.", " It has a minimal, modern look.",
                                      " The composition is calm."};
  t.refined = t.filtered + kMood[rng.below(3)];
  for (std::size_t i = 0; i < unique.size(); ++i)
    t.entities += (i ? "\n" : "") + format_entity_line(static_cast<int>(i + 1), unique[i]);
  if (rng.below(10) == 0) t.entities += "\nAll of the objects above are flat shapes.";
  return t;
}

SynthOutput synth_paths(const std::string& dir) {
  const fs::path d(dir);
  return {(d / "detection.jsonl").string(), (d / "grounding.jsonl").string(), (d / "raw_pairs.jsonl").string(),
          (d / "llm_table.json").string(),  (d / "val_heldout.jsonl").string(), (d / "val.jsonl").string()};
}

SynthOutput generate_synthetic(const SyntheticShapesSpec& spec, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  const auto out = synth_paths(dir);
  const auto train = training_categories(spec);
  const auto all = all_categories(spec);
  if (train.empty()) throw std::invalid_argument("no training categories");
  Rng rng(spec.seed);
  int next_id = 0;
  auto render = [&](const std::vector<std::string>& cats, const std::string& required, int count) {
    const std::string id = "img" + std::to_string(next_id++);
    auto scene = render_scene(spec, cats, rng, count, required);
    const std::string rel = "images/" + id + ".png";
    write_image(scene.image, (fs::path(dir) / rel).string());
    return std::make_tuple(id, rel, std::move(scene.objects));
  };
  auto count = [&] { return rng.uniform_int(spec.min_objects, spec.max_objects); };

  std::vector<SampleRecord> det, grd, val_h, val;
  for (int i = 0; i < spec.detection_images; ++i) {
    auto [id, rel, objs] = render(train, "", count());
    det.push_back({id, rel, SourceKind::detection, "", objs});
  }
  for (int i = 0; i < spec.grounding_images; ++i) {
    auto [id, rel, objs] = render(train, "", count());
    std::vector<std::string> phrases;
    for (const auto& o : objs) phrases.push_back(o.triplet.phrase);
    const std::string caption = objs.empty() ? "" : join_phrases(phrases) + ".";
    grd.push_back({id, rel, SourceKind::grounding, caption, objs});
  }
  MockLlmClient llm;
  std::vector<RawPair> raw;
  for (int i = 0; i < spec.image_text_images; ++i) {
    const bool none = rng.uniform() < spec.none_fraction;
    auto [id, rel, objs] = render(train, "", none ? 0 : std::max(1, count()));
    const auto texts = scene_texts(objs, id, rng);
    raw.push_back({id, rel, texts.raw_caption});
    llm.add(build_recaption_prompt(texts.raw_caption), texts.refined);
    llm.add(build_filter_prompt(texts.refined), texts.filtered);
    if (texts.filtered != "None") llm.add(build_entity_prompt(texts.filtered), texts.entities);
  }
  for (int i = 0; i < spec.val_heldout_images; ++i) {
    const std::string required = spec.held_out.empty() ? "" : spec.held_out[i % spec.held_out.size()];
    auto [id, rel, objs] = render(all, required, std::max(1, count()));
    val_h.push_back({id, rel, SourceKind::detection, "", objs});
  }
  for (int i = 0; i < spec.val_images; ++i) {
    auto [id, rel, objs] = render(train, "", std::max(1, count()));
    val.push_back({id, rel, SourceKind::detection, "", objs});
  }
  write_records(out.detection, det);
  write_records(out.grounding, grd);
  write_records(out.raw_pairs, raw);
  llm.save(out.llm_table);
  write_records(out.val_heldout, val_h);
  write_records(out.val, val);
  std::ofstream((fs::path(dir) / "synth_spec.json").string()) << to_json(spec).dump(1) << '\n';
  return out;
}

}  // namespace granudet
