#include "granudet/concepts.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "granudet/rng.hpp"

namespace granudet {

std::string normalize_text(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (char ch : s) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

EntityTriplet make_triplet(std::string_view phrase, std::string_view category, std::string_view parent) {
  EntityTriplet t{normalize_text(phrase), normalize_text(category), normalize_text(parent)};
  for (const std::string* f : {&t.phrase, &t.category, &t.parent_category}) {
    if (f->empty()) throw std::invalid_argument("entity triplet field is empty");
    if (f->find('|') != std::string::npos) throw std::invalid_argument("entity triplet field contains '|'");
  }
  return t;
}

std::string concept_text(const ConceptRecord& r) {
  if (r.definition && !r.definition->empty()) return r.text + ": " + *r.definition;
  return r.text;
}

NounCorpus::NounCorpus(std::map<std::string, std::int64_t> counts) : counts_(std::move(counts)) {
  ordered_.assign(counts_.begin(), counts_.end());
  std::stable_sort(ordered_.begin(), ordered_.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
}

std::int64_t NounCorpus::frequency(const std::string& concept_name) const {
  auto it = counts_.find(concept_name);
  return it == counts_.end() ? 0 : it->second;
}

void NounCorpus::save(std::ostream& out) const {
  for (const auto& [c, f] : ordered_) out << c << '\t' << f << '\n';
}

NounCorpus NounCorpus::load(std::istream& in) {
  std::map<std::string, std::int64_t> counts;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw std::runtime_error("corpus line without tab: " + line);
    counts[line.substr(0, tab)] = std::stoll(line.substr(tab + 1));
  }
  return NounCorpus(std::move(counts));
}

void NounCorpus::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write corpus: " + path);
  save(f);
}

NounCorpus NounCorpus::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read corpus: " + path);
  return load(f);
}

NounCorpus build_corpus(std::span<const EntityTriplet> entities, std::int64_t min_frequency, int workers) {
  if (min_frequency < 1) throw std::invalid_argument("min_frequency must be at least 1");
  workers = std::max(1, workers);
  std::vector<std::unordered_map<std::string, std::int64_t>> shards(workers);
  auto tally = [&](int w) {
    for (std::size_t i = w; i < entities.size(); i += workers) ++shards[w][normalize_text(entities[i].category)];
  };
  if (workers == 1) {
    tally(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(tally, w);
    for (auto& t : pool) t.join();
  }
  std::map<std::string, std::int64_t> total;
  for (const auto& s : shards)
    for (const auto& [c, n] : s) total[c] += n;
  std::erase_if(total, [&](const auto& kv) { return kv.first.empty() || kv.second < min_frequency; });
  return NounCorpus(std::move(total));
}

std::vector<std::string> top_frequent(const NounCorpus& corpus, std::size_t n) {
  if (n < 1) throw std::invalid_argument("top_frequent: n must be at least 1");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(n, corpus.size()); ++i) out.push_back(corpus.ordered()[i].first);
  return out;
}

NegativeSample sample_negatives(std::span<const std::string> positives, const NounCorpus& corpus, std::size_t k,
                                std::uint64_t seed) {
  if (corpus.empty()) throw std::invalid_argument("sample_negatives: corpus is empty");
  std::unordered_set<std::string> pos;
  for (const auto& p : positives) pos.insert(normalize_text(p));
  std::vector<std::string> candidates;
  for (const auto& [c, f] : corpus.ordered())
    if (!pos.count(c)) candidates.push_back(c);
  NegativeSample out;
  out.exhausted = k > candidates.size();
  const std::size_t take = std::min(k, candidates.size());
  Rng rng(seed);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + rng.below(candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
    out.concepts.push_back(candidates[i]);
  }
  return out;
}

std::vector<std::string> merge_negative_pools(std::span<const std::vector<std::string>> pools) {
  std::unordered_set<std::string> seen;
  std::vector<std::string> out;
  for (const auto& pool : pools)
    for (const auto& c : pool) {
      std::string n = normalize_text(c);
      if (seen.insert(n).second) out.push_back(std::move(n));
    }
  return out;
}

std::string format_object_groundtruth(const EntityTriplet& t) {
  const EntityTriplet n = make_triplet(t.phrase, t.category, t.parent_category);
  return n.phrase + " | " + n.category + " | " + n.parent_category;
}

std::optional<EntityTriplet> parse_generated_label(std::string_view text) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto bar = text.find('|', start);
    fields.push_back(normalize_text(text.substr(start, bar == std::string_view::npos ? text.npos : bar - start)));
    if (bar == std::string_view::npos) break;
    start = bar + 1;
  }
  if (fields.size() != 3) return std::nullopt;
  for (const auto& f : fields)
    if (f.empty()) return std::nullopt;
  return EntityTriplet{fields[0], fields[1], fields[2]};
}

std::pair<std::string, std::string> detector_text_label(const EntityTriplet& t) { return {t.phrase, t.category}; }

}  // namespace granudet
