#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "granudet/annotation.hpp"
#include "granudet/rng.hpp"

using namespace granudet;

namespace {

std::string golden(const std::string& name) {
  std::ifstream f(std::string(GRANUDET_GOLDEN_DIR) + "/" + name);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string replace_once(std::string s, const std::string& from, const std::string& to) {
  const auto at = s.find(from);
  if (at != std::string::npos) s.replace(at, from.size(), to);
  return s;
}

// Returns a scripted box list.
class FixedScorer : public BoxScorer {
 public:
  std::vector<ScoredBox> boxes;
  std::vector<std::string> seen_texts;
  std::vector<ScoredBox> detect(const Image&, std::span<const std::string> texts) override {
    seen_texts.assign(texts.begin(), texts.end());
    return boxes;
  }
};

const std::string kSlot = "\x01SLOT\x01";

}  // namespace

TEST(Prompts, MatchGoldenFiles) {
  EXPECT_EQ(replace_once(build_recaption_prompt(kSlot), kSlot, "{raw caption}"), golden("recaption_prompt.txt"));
  EXPECT_EQ(replace_once(build_filter_prompt(kSlot), kSlot, "{caption}"), golden("filter_prompt.txt"));
  EXPECT_EQ(replace_once(build_entity_prompt(kSlot), kSlot, "{caption}"), golden("entity_prompt.txt"));
  const auto s = build_instruction_sample(kSlot, "x", {});
  EXPECT_EQ(replace_once(s.question, kSlot, "{raw caption}"), golden("instruction_question.txt"));
}

TEST(Prompts, SubstitutionIsTheOnlyDifference) {
  EXPECT_EQ(build_recaption_prompt("a dog"),
            "Given a noisy caption of the image: a dog, write a detailed clean description of the image.");
  EXPECT_EQ(build_recaption_prompt(""),
            "Given a noisy caption of the image: , write a detailed clean description of the image.");
  for (auto build : {build_recaption_prompt, build_filter_prompt, build_entity_prompt}) {
    const auto a = build("first caption"), b = build("the second, longer caption");
    EXPECT_EQ(replace_once(a, "first caption", kSlot), replace_once(b, "the second, longer caption", kSlot));
  }
}

TEST(EntityParser, Examples) {
  const auto one = parse_entity_list("1. 'red car', 'car', 'vehicle'");
  ASSERT_EQ(one.entities.size(), 1u);
  EXPECT_EQ(one.entities[0], (EntityTriplet{"red car", "car", "vehicle"}));
  EXPECT_EQ(one.skipped_lines, 0);

  const auto none = parse_entity_list("None");
  EXPECT_TRUE(none.entities.empty());
  EXPECT_TRUE(none.none);
  EXPECT_TRUE(parse_entity_list("'None'.").none);
  EXPECT_TRUE(parse_entity_list("").entities.empty());

  const auto curly = parse_entity_list("1. \xE2\x80\x98wooden table\xE2\x80\x99, \xE2\x80\x98table\xE2\x80\x99, "
                                       "\xE2\x80\x98" "furniture\xE2\x80\x99\n"
                                       "\n"
                                       "2) 'Bird's nest', 'nest', 'structure'.\n"
                                       "3. red ball - ball - toy\n"
                                       "4. 'a', 'b'\n"
                                       "5. 'x|y', 'y', 'z'");
  ASSERT_EQ(curly.entities.size(), 2u);
  EXPECT_EQ(curly.entities[0], (EntityTriplet{"wooden table", "table", "furniture"}));
  EXPECT_EQ(curly.entities[1], (EntityTriplet{"bird's nest", "nest", "structure"}));
  EXPECT_EQ(curly.skipped_lines, 3);
}

TEST(EntityParser, FuzzedLinesReserializeToFixpoint) {
  Rng rng(11);
  const std::vector<std::string> seeds{"1. 'red car', 'car', 'vehicle'", "2. 'tall tree', 'tree', 'plant'",
                                       "3) 'Bird's eye', 'eye', 'body part'.", "None"};
  const std::string alphabet = "ab '\",.|)1\n\t\xE2\x80\x98\xE2\x80\x99";
  int accepted = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::string line = seeds[rng.below(seeds.size())];
    const int edits = rng.uniform_int(0, 4);
    for (int e = 0; e < edits; ++e) {
      const std::size_t at = rng.below(line.size() + 1);
      switch (rng.below(3)) {
        case 0:
          line.insert(at, 1, alphabet[rng.below(alphabet.size())]);
          break;
        case 1:
          if (at < line.size()) line.erase(at, 1);
          break;
        default:
          if (at < line.size()) line[at] = alphabet[rng.below(alphabet.size())];
      }
    }
    const auto parsed = parse_entity_list(line);
    for (std::size_t i = 0; i < parsed.entities.size(); ++i) {
      ++accepted;
      const auto canonical = format_entity_line(static_cast<int>(i + 1), parsed.entities[i]);
      const auto again = parse_entity_list(canonical);
      ASSERT_EQ(again.entities.size(), 1u) << canonical;
      EXPECT_EQ(again.entities[0], parsed.entities[i]);
      EXPECT_EQ(format_entity_line(static_cast<int>(i + 1), again.entities[0]), canonical);
    }
  }
  EXPECT_GT(accepted, 20);
}

TEST(InstructionSample, AnswerFormatAndRoundTrip) {
  const auto empty = build_instruction_sample("raw", "a clean caption.", {});
  EXPECT_EQ(empty.answer, "Caption: a clean caption.\nObjects:");
  const std::vector<EntityTriplet> one{{"red car", "car", "vehicle"}};
  EXPECT_EQ(build_instruction_sample("raw", "c", one).answer, "Caption: c\nObjects: 1. 'red car', 'car', 'vehicle'");
  const std::vector<EntityTriplet> many{{"red car", "car", "vehicle"}, {"small dog", "dog", "animal"},
                                        {"oak tree", "tree", "plant"}};
  const auto s = build_instruction_sample("noisy", "a red car near a small dog.", many);
  const auto [caption, parsed] = parse_instruction_answer(s.answer);
  EXPECT_EQ(caption, "a red car near a small dog.");
  EXPECT_EQ(parsed.entities, many);
  EXPECT_TRUE(parse_instruction_answer(empty.answer).second.entities.empty());
}

TEST(MockLlm, TableLookupAndPersistence) {
  MockLlmClient c("fallback text");
  c.add("prompt a", "answer a");
  EXPECT_EQ(c.generate("prompt a"), "answer a");
  EXPECT_EQ(c.generate("prompt a"), c.generate("prompt a"));
  EXPECT_EQ(c.generate("unknown"), "fallback text");
  const auto path = (std::filesystem::temp_directory_path() / "granudet_llm_table.json").string();
  c.save(path);
  auto back = MockLlmClient::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.generate("prompt a"), "answer a");
  EXPECT_EQ(back.generate("other"), "fallback text");
}

TEST(MockLlm, AnnotatePairRunsThreeSteps) {
  MockLlmClient c;
  const std::string refined = "A red car parked by a small dog. The mood is calm.";
  const std::string filtered = "A red car parked by a small dog.";
  c.add(build_recaption_prompt("car dog pic"), refined);
  c.add(build_filter_prompt(refined), filtered);
  c.add(build_entity_prompt(filtered), "1. 'red car', 'car', 'vehicle'\n2. 'small dog', 'dog', 'animal'\nnoise");
  AnnotationStats stats;
  const auto r = annotate_pair({"img1", "img1.png", "car dog pic"}, c, stats);
  EXPECT_EQ(r.annotation.refined_caption, filtered);
  ASSERT_EQ(r.annotation.entities.size(), 2u);
  EXPECT_EQ(stats.skipped_lines, 1);
  const auto none = annotate_pair({"img2", "img2.png", "unknown"}, c, stats);
  EXPECT_TRUE(none.annotation.entities.empty());
  EXPECT_EQ(stats.filtered_to_none, 1);
}

TEST(PseudoLabels, CategoryMatchKeepsWholeEntity) {
  RefinedAnnotation ann{"i", "i.png", "cap", {{"red car", "car", "vehicle"}, {"small dog", "dog", "animal"}}};
  FixedScorer scorer;
  scorer.boxes = {{Box{0.1, 0.1, 0.4, 0.4}, {0.05, 0.31, 0.02, 0.01}}, {Box{0.5, 0.5, 0.9, 0.9}, {0.1, 0.1, 0.15, 0.12}}};
  Image img(8, 8);
  PseudoLabelStats stats;
  const auto s = assign_pseudo_labels(scorer, img, ann, 0.2, &stats);
  EXPECT_EQ(scorer.seen_texts, (std::vector<std::string>{"red car", "car", "small dog", "dog"}));
  ASSERT_EQ(s.boxes.size(), 1u);
  EXPECT_EQ(s.boxes[0].entity, ann.entities[0]);
  EXPECT_DOUBLE_EQ(s.boxes[0].score, 0.31);
  EXPECT_EQ(stats.entities_dropped, 1);
  EXPECT_TRUE(assign_pseudo_labels(scorer, img, ann, 1.0).boxes.empty());
}

TEST(PseudoLabels, OracleScorerReproducesGroundTruth) {
  const std::vector<EntityTriplet> ents{{"small red square", "red square", "square"},
                                       {"large blue circle", "blue circle", "circle"}};
  const std::vector<Box> gt{Box{0.1, 0.1, 0.3, 0.3}, Box{0.5, 0.4, 0.9, 0.8}};
  FixedScorer oracle;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    std::vector<double> s(4, 0.0);
    s[2 * i] = s[2 * i + 1] = 1.0;
    oracle.boxes.push_back({gt[i], s});
  }
  const auto out = assign_pseudo_labels(oracle, Image(8, 8), {"i", "p", "c", ents}, 0.2);
  ASSERT_EQ(out.boxes.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(out.boxes[i].box, gt[i]);
    EXPECT_EQ(out.boxes[i].entity, ents[i]);
  }
}

TEST(PseudoLabels, ThresholdMonotone) {
  Rng rng(12);
  RefinedAnnotation ann{"i", "p", "c", {{"a x", "x", "z"}, {"b y", "y", "z"}, {"c w", "w", "z"}}};
  for (int trial = 0; trial < 200; ++trial) {
    FixedScorer scorer;
    const int n = rng.uniform_int(0, 12);
    for (int i = 0; i < n; ++i) {
      const double cx = rng.uniform(0.2, 0.8), cy = rng.uniform(0.2, 0.8);
      std::vector<double> s(6);
      for (double& v : s) v = rng.uniform(0.0, 0.5);
      scorer.boxes.push_back({Box::from_center(cx, cy, rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)), s});
    }
    std::vector<PseudoLabeledSample> runs;
    for (double t : {0.15, 0.2, 0.25, 0.3}) {
      runs.push_back(assign_pseudo_labels(scorer, Image(4, 4), ann, t));
      for (const auto& b : runs.back().boxes) EXPECT_GE(b.score, t);
    }
    for (std::size_t r = 1; r < runs.size(); ++r)
      for (const auto& b : runs[r].boxes) {
        const bool found = std::any_of(runs[r - 1].boxes.begin(), runs[r - 1].boxes.end(), [&](const PseudoBox& o) {
          return o.box == b.box && o.entity == b.entity && o.score == b.score;
        });
        EXPECT_TRUE(found);
      }
  }
}
