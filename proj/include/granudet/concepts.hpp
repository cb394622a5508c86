#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace granudet {

// Lowercase, trim, collapse internal whitespace runs to one space.
std::string normalize_text(std::string_view s);

// One object described at three granularities.
struct EntityTriplet {
  std::string phrase;           // with adjectives, e.g. "small red square"
  std::string category;         // bare noun, e.g. "red square"
  std::string parent_category;  // broader class, e.g. "square"

  bool operator==(const EntityTriplet&) const = default;
  auto operator<=>(const EntityTriplet&) const = default;
};

// Normalizes the three fields. Throws std::invalid_argument when a field is
// empty after normalization or contains '|'.
EntityTriplet make_triplet(std::string_view phrase, std::string_view category, std::string_view parent);

enum class Polarity { positive, negative };

struct ConceptRecord {
  std::string text;
  std::optional<std::string> definition;
  Polarity polarity = Polarity::positive;
};

// "name: definition" when a definition exists, the bare name otherwise.
std::string concept_text(const ConceptRecord& r);

// Category frequency table. Iteration order is descending frequency, then
// lexicographic.
class NounCorpus {
 public:
  NounCorpus() = default;
  explicit NounCorpus(std::map<std::string, std::int64_t> counts);

  std::size_t size() const { return ordered_.size(); }
  bool empty() const { return ordered_.empty(); }
  bool contains(const std::string& concept_name) const { return counts_.count(concept_name) != 0; }
  std::int64_t frequency(const std::string& concept_name) const;
  const std::vector<std::pair<std::string, std::int64_t>>& ordered() const { return ordered_; }

  void save(std::ostream& out) const;
  static NounCorpus load(std::istream& in);
  void save(const std::string& path) const;
  static NounCorpus load(const std::string& path);

 private:
  std::map<std::string, std::int64_t> counts_;
  std::vector<std::pair<std::string, std::int64_t>> ordered_;
};

// Tallies the category field of every entity (raw occurrences) and drops
// concepts seen fewer than min_frequency times. `workers` > 1 tallies shards
// on separate threads; the result is identical to the sequential tally.
NounCorpus build_corpus(std::span<const EntityTriplet> entities, std::int64_t min_frequency, int workers = 1);

std::vector<std::string> top_frequent(const NounCorpus& corpus, std::size_t n);

struct NegativeSample {
  std::vector<std::string> concepts;
  bool exhausted = false;  // fewer candidates than requested
};

NegativeSample sample_negatives(std::span<const std::string> positives, const NounCorpus& corpus, std::size_t k,
                                std::uint64_t seed);

// Union of the pools in first-seen order, deduplicated on normalized text.
std::vector<std::string> merge_negative_pools(std::span<const std::vector<std::string>> pools);

// "phrase | category | parent category"
std::string format_object_groundtruth(const EntityTriplet& t);
// Inverse of format_object_groundtruth; nullopt unless the text splits into
// exactly three non-empty fields.
std::optional<EntityTriplet> parse_generated_label(std::string_view text);

// (phrase, category): the texts the detector trains on and is queried with.
std::pair<std::string, std::string> detector_text_label(const EntityTriplet& t);

}  // namespace granudet
