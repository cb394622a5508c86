#include "granudet/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace granudet {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DetectorConfig, dim, heads, points, encoder_layers, decoder_layers,
                                                num_queries, ffn, focal_alpha, focal_gamma, w_align, w_box, w_iou)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TextEncoderConfig, dim, layers, heads, ffn, max_len)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CaptionerConfig, dim, heads, layers, ffn, points, max_len,
                                                image_queries)

namespace {

const char kMagic[] = "GRANUDET-CKPT 1\n";

template <typename T>
T strict_get(const nlohmann::json& j, const std::string& section) {
  const nlohmann::json known = T{};
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw std::invalid_argument("unknown config key: " + section + "." + k);
  return j.get<T>();
}

}  // namespace

nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"detector", cfg.detector}, {"text_encoder", cfg.text}, {"captioner", cfg.captioner}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  for (const auto& [k, v] : j.items()) {
    if (k == "detector") {
      cfg.detector = strict_get<DetectorConfig>(v, k);
    } else if (k == "text_encoder") {
      cfg.text = strict_get<TextEncoderConfig>(v, k);
    } else if (k == "captioner") {
      cfg.captioner = strict_get<CaptionerConfig>(v, k);
    } else {
      throw std::invalid_argument("unknown config key: " + k);
    }
  }
  if (cfg.detector.dim != cfg.text.dim || cfg.detector.dim != cfg.captioner.dim)
    throw std::invalid_argument("detector, text_encoder and captioner dims must agree");
  return cfg;
}

Model::Model(Vocabulary v, const ModelConfig& cfg, std::uint64_t seed) : vocab(std::move(v)), config(cfg) {
  Rng rng(seed);
  text = TextEncoder(store, "text.", vocab, cfg.text, rng);
  detector = Detector(store, "det.", cfg.detector, rng);
  captioner = Captioner(store, "cap.", vocab, cfg.captioner, rng);
}

void save_checkpoint(const std::string& path, const Model& model, const nlohmann::json& meta) {
  static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");
  nlohmann::json params = nlohmann::json::array();
  for (const auto& [name, t] : model.store.entries()) params.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  const nlohmann::json manifest{
      {"config", to_json(model.config)}, {"vocab", model.vocab.words()}, {"meta", meta}, {"params", params}};
  const std::string text = manifest.dump();
  const std::uint64_t len = text.size();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
    f.write(kMagic, sizeof kMagic - 1);
    f.write(reinterpret_cast<const char*>(&len), sizeof len);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : model.store.entries())
      f.write(reinterpret_cast<const char*>(e.second.data()), static_cast<std::streamsize>(e.second.size() * sizeof(double)));
    if (!f) throw std::runtime_error("failed writing checkpoint: " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot finalize checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[sizeof kMagic - 1];
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, kMagic, sizeof magic) != 0) throw std::runtime_error("not a checkpoint file: " + path);
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  f.read(text.data(), static_cast<std::streamsize>(len));
  if (!f) throw std::runtime_error("truncated checkpoint manifest: " + path);
  const auto manifest = nlohmann::json::parse(text);
  const auto words = manifest.at("vocab").get<std::vector<std::string>>();
  Checkpoint ck;
  ck.model = std::make_unique<Model>(Vocabulary::from_words(words), model_config_from_json(manifest.at("config")), 0);
  ck.meta = manifest.at("meta");
  const auto& entries = ck.model->store.entries();
  const auto& params = manifest.at("params");
  if (params.size() != entries.size()) throw std::runtime_error("checkpoint parameter count mismatch: " + path);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto t = entries[i].second;
    if (params[i].at("name") != entries[i].first || params[i].at("rows") != t.rows() || params[i].at("cols") != t.cols())
      throw std::runtime_error("checkpoint parameter mismatch at " + entries[i].first);
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("truncated checkpoint values: " + path);
  return ck;
}

}  // namespace granudet
