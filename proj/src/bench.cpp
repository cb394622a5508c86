#include "granudet/bench.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

namespace granudet {

namespace fs = std::filesystem;
using nlohmann::json;

std::string DataLayout::file(const std::string& dataset) const {
  return (fs::path(dir) / (dataset + ".jsonl")).string();
}

Vocabulary vocabulary_for(const DataLayout& layout) {
  std::vector<std::string> texts;
  for (const char* name : {"detection", "grounding"}) {
    const std::string f = layout.file(name);
    if (!fs::exists(f)) continue;
    for (const auto& r : read_records<SampleRecord>(f, sample_from_json)) {
      texts.push_back(r.caption);
      for (const auto& o : r.objects) texts.push_back(format_object_groundtruth(o.triplet));
    }
  }
  const std::string table = (fs::path(layout.dir) / "llm_table.json").string();
  if (fs::exists(table)) {
    std::ifstream f(table);
    const json j = json::parse(f);
    for (const auto& [k, v] : j.at("responses").items()) texts.push_back(v.get<std::string>());
  }
  return Vocabulary::build(texts);
}

TrainingData load_training_data(const DataLayout& layout, const std::vector<std::string>& names, ImageCache* images) {
  TrainingData data;
  data.images = images;
  for (const auto& n : names) {
    const std::string f = layout.file(n);
    if (!fs::exists(f)) throw std::runtime_error("missing dataset file " + f);
    data.datasets.push_back(Dataset::load(f, n));
  }
  if (fs::exists(layout.refined())) data.corpus = corpus_from_refined(layout.refined());
  const std::string det = layout.file("detection");
  if (fs::exists(det)) data.det_categories = dataset_categories(Dataset::load(det, "detection"));
  return data;
}

BenchmarkConfig default_benchmark_config(std::uint64_t seed) {
  BenchmarkConfig c;
  c.seed = seed;
  c.synth.seed = seed;
  for (int s = 0; s < 3; ++s) {
    StageConfig& st = c.stages[s];
    st.seed = seed + static_cast<std::uint64_t>(s) + 1;
    st.warmup = 100;
    st.grad_clip = 1.0;
  }
  c.stages[0].epochs = 12;
  c.stages[0].lr = 1e-3;
  c.stages[0].scale_min = 0.75;
  c.stages[0].scale_max = 1.25;
  c.stages[1].epochs = 6;
  c.stages[1].lr = 1e-3;
  c.stages[2].epochs = 4;
  c.stages[2].lr = 3e-4;
  return c;
}

namespace {

json detect_to_json(const DetectOptions& o) { return {{"chunk_size", o.chunk_size}, {"retain_top", o.retain_top}}; }

json generative_to_json(const GenerativeOptions& o) {
  return {{"top_k", o.top_k},
          {"corpus_size", o.corpus_size},
          {"score_threshold", o.score_threshold},
          {"nms_iou", o.nms_iou},
          {"max_len", o.max_len}};
}

void check_keys(const json& j, const json& known, const std::string& what) {
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw std::invalid_argument("unknown " + what + " key: " + k);
}

}  // namespace

json to_json(const BenchmarkConfig& c) {
  return {{"synth", to_json(c.synth)},
          {"model", to_json(c.model)},
          {"stage1", to_json(c.stages[0])},
          {"stage2", to_json(c.stages[1])},
          {"stage3", to_json(c.stages[2])},
          {"pseudo_threshold", c.pseudo_threshold},
          {"detect", detect_to_json(c.detect)},
          {"generative", generative_to_json(c.generative)},
          {"seed", c.seed}};
}

BenchmarkConfig benchmark_config_from_json(const json& j) {
  const std::uint64_t seed = j.value("seed", std::uint64_t{0});
  BenchmarkConfig c = default_benchmark_config(seed);
  json base = to_json(c);
  check_keys(j, base, "benchmark");
  for (const char* sec : {"synth", "model", "stage1", "stage2", "stage3", "detect", "generative"}) {
    if (!j.contains(sec)) continue;
    check_keys(j[sec], base[sec], sec);
    base[sec].update(j[sec]);
  }
  if (j.contains("pseudo_threshold")) base["pseudo_threshold"] = j["pseudo_threshold"];
  c.synth = synth_spec_from_json(base["synth"]);
  c.model = model_config_from_json(base["model"]);
  for (int s = 0; s < 3; ++s) {
    json st = base["stage" + std::to_string(s + 1)];
    if (st.value("stage", s + 1) != s + 1) throw std::invalid_argument("stage key mismatch");
    c.stages[s] = stage_config_from_json(st);
  }
  c.pseudo_threshold = base["pseudo_threshold"].get<double>();
  const json& d = base["detect"];
  c.detect = {d["chunk_size"].get<int>(), d["retain_top"].get<int>()};
  const json& g = base["generative"];
  c.generative = {g["top_k"].get<int>(), g["corpus_size"].get<std::size_t>(), g["score_threshold"].get<double>(),
                  g["nms_iou"].get<double>(), g["max_len"].get<int>()};
  if (c.pseudo_threshold < 0 || c.pseudo_threshold > 1) throw std::invalid_argument("pseudo_threshold not in [0,1]");
  return c;
}

json run_benchmark(const BenchmarkConfig& cfg, const std::string& dir,
                   const std::function<void(const std::string&)>& log) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - t0).count(); };
  auto say = [&](const std::string& m) {
    if (log) log("[" + std::to_string(static_cast<int>(elapsed())) + "s] " + m);
  };
  json report;
  report["seed"] = cfg.seed;
  report["config"] = to_json(cfg);

  fs::create_directories(dir);
  const SynthOutput synth = generate_synthetic(cfg.synth, dir);
  const DataLayout layout{dir};
  say("synthetic data written");

  MockLlmClient llm = MockLlmClient::load(synth.llm_table);
  const AnnotationStats astats = annotate_file(synth.raw_pairs, llm, layout.refined(), layout.instructions());
  report["annotation"] = {{"pairs", astats.pairs},
                          {"filtered_to_none", astats.filtered_to_none},
                          {"entities", astats.entities},
                          {"skipped_lines", astats.skipped_lines}};
  corpus_from_refined(layout.refined()).save(layout.corpus());
  say("annotation done: " + report["annotation"].dump());

  ImageCache images;
  Model model(vocabulary_for(layout), cfg.model, cfg.seed);
  auto train = [&](int s) {
    const StageConfig& st = cfg.stages[s - 1];
    const TrainingData data = load_training_data(layout, st.datasets, &images);
    double recent = 0.0;
    const StageResult res = run_stage(model, st, data, [&](const StepLog& l) {
      recent = 0.98 * recent + 0.02 * l.total;
      if (l.step % 200 == 0) say("stage " + std::to_string(s) + " step " + std::to_string(l.step) + " loss " +
                                 std::to_string(l.total) + " avg " + std::to_string(recent));
    });
    save_checkpoint((fs::path(dir) / ("stage" + std::to_string(s) + ".ckpt")).string(), model, {{"stage", s}});
    double tail = 0.0;
    const std::size_t n = std::min<std::size_t>(50, res.log.size());
    for (std::size_t i = res.log.size() - n; i < res.log.size(); ++i) tail += res.log[i].total;
    report["stage" + std::to_string(s)] = {{"steps", res.log.size()},
                                           {"seconds", res.seconds},
                                           {"final_loss", n ? tail / n : 0.0},
                                           {"frozen_unchanged", res.frozen_hash_before == res.frozen_hash_after}};
    say("stage " + std::to_string(s) + " done: " + report["stage" + std::to_string(s)].dump());
  };

  train(1);
  const PseudoLabelStats ps = pseudolabel_file(layout.refined(), model, cfg.pseudo_threshold, layout.pseudo(), &images);
  report["pseudolabel"] = {{"images", ps.images},
                           {"entities", ps.entities},
                           {"entities_dropped", ps.entities_dropped},
                           {"boxes", ps.boxes},
                           {"threshold", cfg.pseudo_threshold}};
  say("pseudo-labelling done: " + report["pseudolabel"].dump());
  train(2);
  train(3);

  const auto cats = all_categories(cfg.synth);
  const Dataset heldout = Dataset::load(synth.val_heldout, "val_heldout");
  const DetectionReport det = evaluate_detection(model, heldout, cats, cfg.synth.held_out, cfg.detect, 50, &images);
  report["heldout_detection"] = to_json(det);
  say("held-out detection: " + report["heldout_detection"].dump());

  const Dataset val = Dataset::load(synth.val, "val");
  const NounCorpus corpus = NounCorpus::load(layout.corpus());
  const GenerativeReport gen =
      evaluate_generative(model, corpus, val, training_categories(cfg.synth), cfg.generative, &images);
  report["generative"] = to_json(gen);
  std::vector<json> preds;
  for (const auto& p : gen.all) preds.push_back(to_json(p));
  write_jsonl((fs::path(dir) / "generative_predictions.jsonl").string(), preds);
  say("generative: " + report["generative"].dump());

  report["seconds"] = elapsed();
  std::ofstream((fs::path(dir) / "report.json").string()) << report.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
  return report;
}

}  // namespace granudet
