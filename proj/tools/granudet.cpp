// granudet: synthetic data, annotation, staged training, evaluation and
// inference from one binary.
//
// Config files are JSON. Flags given on the command line override the file.
//   synth        --config synth.json (SyntheticShapesSpec keys)
//   train        --config stage.json (StageConfig keys; "stage" must match --stage)
//   bench        --config bench.json (synth, model, stage1..3, pseudo_threshold,
//                                     detect, generative, seed)
//   model config (train --stage 1 without --init): --model model.json
//                (detector, text_encoder, captioner)
#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "granudet/bench.hpp"
#include "granudet/pipeline.hpp"

using namespace granudet;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path);
  return json::parse(f);
}

void write_json(const std::string& path, const json& j) {
  if (const auto d = parent_dir(path); !d.empty()) fs::create_directories(d);
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << j.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
}

// Relative data directories resolve under $GRANUDET_CACHE when it is set.
std::string data_root(const std::string& dir) {
  const char* cache = std::getenv("GRANUDET_CACHE");
  if (!cache || fs::path(dir).is_absolute() || fs::exists(dir)) return dir;
  return (fs::path(cache) / dir).string();
}

void print_table(const json& metrics) {
  for (const auto& [k, v] : metrics.items())
    if (v.is_number()) std::cerr << "  " << k << std::string(k.size() < 28 ? 28 - k.size() : 1, ' ') << v << '\n';
}

int stage_of(const json& meta) { return meta.value("stage", 0); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"granudet: open-vocabulary detection with hierarchical labels"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Random seed")->capture_default_str();

  // synth
  auto* synth = app.add_subcommand("synth", "Render the synthetic shapes benchmark");
  std::string synth_config, synth_out;
  synth->add_option("--config", synth_config, "SyntheticShapesSpec JSON");
  synth->add_option("--out", synth_out, "Output directory")->required();

  // annotate
  auto* annotate = app.add_subcommand("annotate", "Recaption, filter and extract entities with the mock LLM");
  std::string ann_in, ann_table, ann_out;
  annotate->add_option("input", ann_in, "raw_pairs.jsonl")->required();
  annotate->add_option("--llm-table", ann_table, "Mock LLM response table")->required();
  annotate->add_option("--out", ann_out, "refined.jsonl")->required();

  // pseudolabel
  auto* pseudo = app.add_subcommand("pseudolabel", "Assign detector boxes to extracted entities");
  std::string ps_in, ps_ckpt, ps_out;
  double threshold = 0.2;
  int shards = 1;
  pseudo->add_option("input", ps_in, "refined.jsonl")->required();
  pseudo->add_option("--checkpoint", ps_ckpt, "Stage-1 or later checkpoint")->required();
  pseudo->add_option("--threshold", threshold, "Box score threshold")->capture_default_str();
  pseudo->add_option("--shards", shards, "Output shards (1 = single file)")->capture_default_str();
  pseudo->add_option("--out", ps_out, "pseudo.jsonl")->required();

  // train
  auto* train = app.add_subcommand("train", "Run one training stage");
  int stage = 0;
  std::string tr_config, tr_model, tr_data, tr_init, tr_out, tr_log;
  train->add_option("--stage", stage, "1, 2 or 3")->required()->check(CLI::Range(1, 3));
  train->add_option("--config", tr_config, "Stage config JSON");
  train->add_option("--model", tr_model, "Model config JSON (stage 1 from scratch)");
  train->add_option("--data", tr_data, "Data directory")->required();
  train->add_option("--init", tr_init, "Checkpoint of the previous stage");
  train->add_option("--out", tr_out, "Output checkpoint")->required();
  train->add_option("--log", tr_log, "Metrics log (JSON lines)");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_mode, ev_ckpt, ev_data, ev_out, ev_corpus;
  std::vector<std::string> ev_categories, ev_classes;
  DetectOptions dopts;
  GenerativeOptions gopts;
  std::size_t min_dets = 50;
  eval->add_option("mode", ev_mode, "det, gen or densecap")->required()->check(CLI::IsMember({"det", "gen", "densecap"}));
  eval->add_option("--checkpoint", ev_ckpt)->required();
  eval->add_option("--data", ev_data, "Evaluation JSON lines")->required();
  eval->add_option("--categories", ev_categories, "Category vocabulary (det), comma separated")->delimiter(',');
  eval->add_option("--classes", ev_classes, "Classes to score (det; default all), comma separated")->delimiter(',');
  eval->add_option("--corpus", ev_corpus, "Noun corpus (gen/densecap)");
  eval->add_option("--chunk-size", dopts.chunk_size)->capture_default_str();
  eval->add_option("--retain-top", dopts.retain_top)->capture_default_str();
  eval->add_option("--min-dets", min_dets)->capture_default_str();
  eval->add_option("--threshold", gopts.score_threshold, "Objectness threshold (gen)")->capture_default_str();
  eval->add_option("--top-k", gopts.top_k)->capture_default_str();
  eval->add_option("--out", ev_out, "Metrics JSON");

  // infer
  auto* infer = app.add_subcommand("infer", "Detect on images and write a report");
  std::string in_ckpt, in_out, in_corpus;
  std::vector<std::string> in_images, in_categories;
  bool visualize = false;
  double in_threshold = 0.3;
  infer->add_option("images", in_images, "Image files")->required();
  infer->add_option("--checkpoint", in_ckpt)->required();
  infer->add_option("--categories", in_categories, "Category names, comma separated; generative labels when absent")->delimiter(',');
  infer->add_option("--corpus", in_corpus, "Noun corpus for generative mode");
  infer->add_option("--threshold", in_threshold, "Minimum score to report")->capture_default_str();
  infer->add_option("--chunk-size", dopts.chunk_size)->capture_default_str();
  infer->add_flag("--visualize", visualize, "Write overlay PNGs");
  infer->add_option("--out", in_out, "Output directory")->required();

  // bench
  auto* bench = app.add_subcommand("bench", "Full synthetic pipeline: synth, stages 1-3, evaluation");
  std::string bn_config, bn_out;
  bench->add_option("--config", bn_config, "Benchmark config JSON");
  bench->add_option("--out", bn_out, "Work directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  const bool seed_given = app.get_option("--seed")->count() > 0;
  try {
    if (*synth) {
      SyntheticShapesSpec spec = synth_config.empty() ? SyntheticShapesSpec{} : synth_spec_from_json(read_json(synth_config));
      if (seed_given) spec.seed = seed;
      const auto out = generate_synthetic(spec, data_root(synth_out));
      std::cout << json{{"detection", out.detection}, {"grounding", out.grounding}, {"raw_pairs", out.raw_pairs},
                        {"llm_table", out.llm_table}, {"val_heldout", out.val_heldout}, {"val", out.val}}
                       .dump(2)
                << '\n';
    } else if (*annotate) {
      MockLlmClient llm = MockLlmClient::load(ann_table);
      const std::string instr = (fs::path(parent_dir(ann_out)) / "instructions.jsonl").string();
      const auto st = annotate_file(ann_in, llm, ann_out, instr);
      corpus_from_refined(ann_out).save((fs::path(parent_dir(ann_out)) / "corpus.tsv").string());
      std::cout << json{{"pairs", st.pairs}, {"filtered_to_none", st.filtered_to_none}, {"entities", st.entities},
                        {"skipped_lines", st.skipped_lines}, {"invalid_entities", st.invalid_entities}}
                       .dump(2)
                << '\n';
    } else if (*pseudo) {
      const Checkpoint ck = load_checkpoint(ps_ckpt);
      if (stage_of(ck.meta) < 1) throw std::runtime_error("pseudolabel needs a trained checkpoint");
      if (shards < 1) throw std::runtime_error("--shards must be positive");
      ImageCache images;
      const auto st = pseudolabel_file(ps_in, *ck.model, threshold, ps_out, &images);
      if (shards > 1) {
        const auto rows = read_jsonl(ps_out);
        for (int s = 0; s < shards; ++s) {
          std::vector<json> part;
          for (std::size_t i = s; i < rows.size(); i += shards) part.push_back(rows[i]);
          write_jsonl(ps_out + "." + std::to_string(s), part);
        }
      }
      std::cout << json{{"images", st.images}, {"entities", st.entities}, {"entities_dropped", st.entities_dropped},
                        {"boxes", st.boxes}, {"threshold", threshold}}
                       .dump(2)
                << '\n';
    } else if (*train) {
      json cj = tr_config.empty() ? json{{"stage", stage}} : read_json(tr_config);
      if (cj.value("stage", stage) != stage) throw std::runtime_error("config stage does not match --stage");
      cj["stage"] = stage;
      if (seed_given) cj["seed"] = seed;
      const StageConfig cfg = stage_config_from_json(cj);
      std::unique_ptr<Model> model;
      if (stage == 1 && tr_init.empty()) {
        const ModelConfig mc = tr_model.empty() ? ModelConfig{} : model_config_from_json(read_json(tr_model));
        model = std::make_unique<Model>(vocabulary_for(DataLayout{data_root(tr_data)}), mc, cfg.seed);
      } else {
        if (tr_init.empty()) throw std::runtime_error("stage " + std::to_string(stage) + " requires --init");
        Checkpoint ck = load_checkpoint(tr_init);
        if (stage_of(ck.meta) != stage - 1 && !(stage == 1 && stage_of(ck.meta) == 0))
          throw std::runtime_error("stage " + std::to_string(stage) + " requires a stage-" + std::to_string(stage - 1) +
                                   " checkpoint, got stage " + std::to_string(stage_of(ck.meta)));
        model = std::move(ck.model);
      }
      ImageCache images;
      const TrainingData data = load_training_data(DataLayout{data_root(tr_data)}, cfg.datasets, &images);
      std::ofstream logf;
      if (!tr_log.empty()) logf.open(tr_log);
      const StageResult res = run_stage(*model, cfg, data, [&](const StepLog& l) {
        if (logf) logf << to_json(l).dump() << '\n';
      });
      save_checkpoint(tr_out, *model, {{"stage", stage}, {"config", to_json(cfg)}});
      std::cout << json{{"stage", stage}, {"steps", res.log.size()}, {"seconds", res.seconds},
                        {"final_loss", res.log.empty() ? 0.0 : res.log.back().total},
                        {"frozen_unchanged", res.frozen_hash_before == res.frozen_hash_after}}
                       .dump(2)
                << '\n';
    } else if (*eval) {
      const Checkpoint ck = load_checkpoint(ev_ckpt);
      const Dataset data = Dataset::load(ev_data);
      ImageCache images;
      json metrics;
      if (ev_mode == "det") {
        if (ev_categories.empty()) ev_categories = dataset_categories(data);
        metrics = to_json(evaluate_detection(*ck.model, data, ev_categories, ev_classes, dopts, min_dets, &images));
      } else {
        if (ev_corpus.empty()) throw std::runtime_error(ev_mode + " needs --corpus");
        const auto rep = evaluate_generative(*ck.model, NounCorpus::load(ev_corpus), data,
                                             ev_mode == "gen" ? dataset_categories(data) : std::vector<std::string>{},
                                             gopts, &images);
        metrics = to_json(rep);
        if (ev_mode == "densecap") metrics = {{"dense_caption_map", rep.dense_caption_map}, {"images", rep.images}};
      }
      std::cout << metrics.dump(2) << '\n';
      print_table(metrics);
      if (!ev_out.empty()) write_json(ev_out, metrics);
    } else if (*infer) {
      const Checkpoint ck = load_checkpoint(in_ckpt);
      const bool generative = in_categories.empty();
      if (generative && in_corpus.empty()) throw std::runtime_error("infer needs --categories or --corpus");
      const NounCorpus corpus = generative ? NounCorpus::load(in_corpus) : NounCorpus{};
      json report = json::array();
      for (const auto& path : in_images) {
        const Image img = read_image(path);
        const std::string id = fs::path(path).stem().string();
        std::vector<Prediction> preds = generative ? generative_detect(*ck.model, corpus, img, gopts, id)
                                                   : detect(*ck.model, img, in_categories, dopts, id);
        std::erase_if(preds, [&](const Prediction& p) { return p.score < in_threshold; });
        if (!generative) {
          std::vector<Box> boxes;
          std::vector<double> scores;
          for (const auto& p : preds) {
            boxes.push_back(p.box);
            scores.push_back(p.score);
          }
          std::vector<Prediction> kept;
          for (int k : class_agnostic_nms(boxes, scores, 0.5)) kept.push_back(preds[k]);
          preds = std::move(kept);
        }
        json items = json::array();
        for (const auto& p : preds) items.push_back(to_json(p, in_categories));
        std::string overlay;
        if (visualize) {
          overlay = (fs::path(in_out) / (id + "_overlay.png")).string();
          write_overlay(img, preds, in_categories, overlay);
        }
        report.push_back({{"image", path}, {"predictions", items}, {"overlay", overlay}});
      }
      write_json((fs::path(in_out) / "report.json").string(), report);
      std::cout << report.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
    } else if (*bench) {
      json cj = bn_config.empty() ? json::object() : read_json(bn_config);
      if (seed_given) {
        cj["seed"] = seed;
        cj["synth"]["seed"] = seed;
        for (int s = 1; s <= 3; ++s) cj["stage" + std::to_string(s)]["seed"] = seed + s;
      }
      const BenchmarkConfig cfg = benchmark_config_from_json(cj);
      const json report = run_benchmark(cfg, data_root(bn_out), [](const std::string& m) { std::cerr << m << '\n'; });
      std::cout << report.dump(2, ' ', false, json::error_handler_t::replace) << '\n';
    }
  } catch (const std::exception& e) {
    std::cout << json{{"error", e.what()}}.dump(-1, ' ', false, json::error_handler_t::replace) << '\n';
    return 1;
  }
  return 0;
}
