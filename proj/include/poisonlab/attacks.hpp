#pragma once

// Greedy poisoning strategies. Each perturbation attack runs in two phases:
//   1. score every unit by the distortion its deletion causes and keep the top k
//      (synonym: words; character: bytes), or randomly initialise k suffix tokens;
//   2. visit the selected units in order and commit, for each, the candidate that
//      maximises the distortion objective with every other unit held at its current value.
// Ties are broken deterministically: importance ties by lower index, candidate ties by
// lexicographic synonym, character-set order, or vocabulary id.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "poisonlab/common.hpp"
#include "poisonlab/distortion.hpp"
#include "poisonlab/embeddings.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/prompt_template.hpp"
#include "poisonlab/text_units.hpp"

namespace poisonlab {

enum class Strategy { clean, random_label, synonym, character, suffix };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::clean: return "clean";
    case Strategy::random_label: return "random-label";
    case Strategy::synonym: return "synonym";
    case Strategy::character: return "character";
    case Strategy::suffix: return "suffix";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "clean") return Strategy::clean;
  if (s == "random-label") return Strategy::random_label;
  if (s == "synonym") return Strategy::synonym;
  if (s == "character") return Strategy::character;
  if (s == "suffix") return Strategy::suffix;
  throw config_error("unknown strategy '" + std::string(s) + "'");
}

inline bool is_perturbation(Strategy s) {
  return s == Strategy::synonym || s == Strategy::character || s == Strategy::suffix;
}

struct AttackConfig {
  Strategy strategy = Strategy::synonym;
  std::size_t budget = 5;
  std::size_t synonym_m = 10;
  bool allow_noop_candidate = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (budget < 1) throw config_error("attack budget k must be >= 1");
    if (synonym_m < 1) throw config_error("synonym count m must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"strategy", std::string(to_string(strategy))},
            {"budget", budget},
            {"synonym_m", synonym_m},
            {"allow_noop_candidate", allow_noop_candidate},
            {"seed", seed}};
  }
};

struct Edit {
  std::string kind;  // "word", "char", "suffix", "label"
  std::size_t position = 0;
  std::string before;
  std::string after;
  bool operator==(const Edit&) const = default;
};

inline void to_json(nlohmann::json& j, const Edit& e) {
  j = {{"kind", e.kind}, {"position", e.position}, {"before", e.before}, {"after", e.after}};
}
inline void from_json(const nlohmann::json& j, Edit& e) {
  e.kind = j.at("kind").get<std::string>();
  e.position = j.at("position").get<std::size_t>();
  e.before = j.at("before").get<std::string>();
  e.after = j.at("after").get<std::string>();
}

struct PoisonedExample {
  LabeledText original;
  std::string text;
  std::string label;
  std::vector<Edit> edits;
  std::vector<std::string> suffix_tokens;
  std::vector<double> objective_trace;
  std::vector<double> importance;
  std::uint64_t evaluations = 0;
  /// Empty when the attack ran; otherwise why the example passed through unpoisoned.
  std::string failure;

  LabeledText poisoned() const { return {text, label}; }
};

inline bool valid_replacement_word(std::string_view w) {
  if (w.empty()) return false;
  for (char c : w)
    if (!in_text_domain(c) || is_word_separator(c)) return false;
  return true;
}

// Candidate with the highest score; `before(a, b)` decides ties.
template <typename Candidate, typename Score, typename TieBefore>
std::pair<std::size_t, double> argmax_candidate(const std::vector<Candidate>& candidates, Score&& score,
                                                TieBefore&& before) {
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const double s = score(candidates[i]);
    if (s > best_score || (s == best_score && before(candidates[i], candidates[best]))) {
      best = i;
      best_score = s;
    }
  }
  return {best, best_score};
}

inline PoisonedExample synonym_attack(const ModelBackend& backend, const LabeledText& example, const AttackConfig& cfg,
                                      const EmbeddingTable& table, std::string_view dummy, const PromptTemplate& tmpl) {
  cfg.validate();
  PoisonedExample out{example, example.text, example.label, {}, {}, {}, {}, 0, {}};
  const WordSegmentation seg = split_words(example.text);
  if (seg.size() == 0) throw data_error("no replaceable words");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < seg.size(); ++i)
    if (table.lookup(seg.words[i])) eligible.push_back(i);
  if (eligible.empty()) throw data_error("no replaceable words");

  ProbeObjective obj(backend, example, std::string(dummy), tmpl);
  out.importance = importance_scores(obj, Granularity::word);
  const auto selected = top_k_indices(out.importance, cfg.budget, eligible);

  WordSegmentation current = seg;
  for (std::size_t idx : selected) {
    std::vector<std::string> candidates;
    for (auto& s : table.top_m_synonyms(seg.words[idx], cfg.synonym_m))
      if (valid_replacement_word(s)) candidates.push_back(std::move(s));
    if (cfg.allow_noop_candidate) candidates.push_back(current.words[idx]);
    if (candidates.empty()) continue;
    const auto [best, best_score] = argmax_candidate(
        candidates, [&](const std::string& c) { return obj(current.with_word(idx, c)); },
        [](const std::string& a, const std::string& b) { return a < b; });
    out.edits.push_back({"word", idx, current.words[idx], candidates[best]});
    current.words[idx] = candidates[best];
    out.objective_trace.push_back(best_score);
  }
  out.text = current.reconstruct();
  out.evaluations = obj.evaluations();
  return out;
}

inline PoisonedExample character_attack(const ModelBackend& backend, const LabeledText& example,
                                        const AttackConfig& cfg, const CharacterSet& charset, std::string_view dummy,
                                        const PromptTemplate& tmpl) {
  cfg.validate();
  PoisonedExample out{example, example.text, example.label, {}, {}, {}, {}, 0, {}};
  if (example.text.empty()) throw data_error("character attack needs non-empty text");
  ProbeObjective obj(backend, example, std::string(dummy), tmpl);
  out.importance = importance_scores(obj, Granularity::character);
  const auto selected = top_k_indices(out.importance, cfg.budget);

  std::string current = example.text;
  for (std::size_t pos : selected) {
    std::vector<char> candidates;
    for (char c : charset.chars())
      if (c != current[pos] || cfg.allow_noop_candidate) candidates.push_back(c);
    if (cfg.allow_noop_candidate && !charset.contains(current[pos])) candidates.push_back(current[pos]);
    if (candidates.empty()) continue;
    // Candidates are in character-set order, so keeping the first maximum is the tie rule.
    const auto [best, best_score] = argmax_candidate(
        candidates, [&](char c) { return obj(with_char(current, pos, c)); }, [](char, char) { return false; });
    out.edits.push_back({"char", pos, std::string(1, current[pos]), std::string(1, candidates[best])});
    current[pos] = candidates[best];
    out.objective_trace.push_back(best_score);
  }
  out.text = current;
  out.evaluations = obj.evaluations();
  return out;
}

inline std::string render_suffix(const Vocabulary& vocab, const std::vector<TokenId>& suffix) {
  return vocab.detokenize(suffix);
}

inline PoisonedExample suffix_attack(const ModelBackend& backend, const LabeledText& example, const AttackConfig& cfg,
                                     const Vocabulary& vocab, std::string_view dummy, const PromptTemplate& tmpl) {
  cfg.validate();
  const std::vector<TokenId> candidates = vocab.text_domain_tokens();
  if (candidates.empty()) throw data_error("vocabulary has no suffix candidates after excluding specials");
  PoisonedExample out{example, example.text, example.label, {}, {}, {}, {}, 0, {}};

  Rng rng(cfg.seed);
  std::vector<TokenId> suffix(cfg.budget);
  for (auto& t : suffix) t = candidates[uniform_index(rng, candidates.size())];

  ProbeObjective obj(backend, example, std::string(dummy), tmpl);
  for (std::size_t j = 0; j < cfg.budget; ++j) {
    const TokenId initial = suffix[j];
    // Id order is the candidate order, so the first maximum wins ties.
    const auto [best, best_score] = argmax_candidate(
        candidates,
        [&](TokenId v) {
          suffix[j] = v;
          return obj(example.text + render_suffix(vocab, suffix));
        },
        [](TokenId, TokenId) { return false; });
    suffix[j] = candidates[best];
    out.edits.push_back({"suffix", j, vocab.token(initial), vocab.token(suffix[j])});
    out.objective_trace.push_back(best_score);
  }
  for (TokenId t : suffix) out.suffix_tokens.push_back(vocab.token(t));
  out.text = example.text + render_suffix(vocab, suffix);
  out.evaluations = obj.evaluations();
  return out;
}

/// Replaces the label with a uniform draw from the full label space (the true label
/// included). Text is untouched.
inline PoisonedExample random_label_flip(const LabeledText& example, const std::vector<std::string>& label_space,
                                         std::uint64_t seed) {
  if (label_space.size() < 2) throw data_error("random-label baseline needs at least two labels");
  Rng rng(seed);
  const std::string& drawn = label_space[uniform_index(rng, label_space.size())];
  PoisonedExample out{example, example.text, drawn, {}, {}, {}, {}, 0, {}};
  out.edits.push_back({"label", 0, example.label, drawn});
  return out;
}

// ---------------------------------------------------------------------------------------
// Dataset-level driver

struct AttackResources {
  const EmbeddingTable* embeddings = nullptr;
  const CharacterSet* charset = &CharacterSet::printable_ascii();
  std::vector<std::string> label_space;
};

/// Index of the pool example whose text serves as the dummy query for `index`: one draw
/// per dataset from the run seed, moved to the next example for the drawn one itself.
inline std::size_t dummy_index(std::size_t n, std::size_t index, std::uint64_t seed) {
  if (n < 2) return 0;
  Rng rng(derive_seed(seed, 0xd0d0d0d0ULL));
  const std::size_t d = uniform_index(rng, n);
  return index == d ? (d + 1) % n : d;
}

struct PoisonRun {
  std::vector<PoisonedExample> examples;
  std::vector<double> time_ms;
};

inline PoisonedExample poison_example(const ModelBackend* backend, const std::vector<LabeledText>& dataset,
                                      std::size_t index, const AttackConfig& cfg, const AttackResources& res,
                                      const PromptTemplate& tmpl) {
  const LabeledText& ex = dataset[index];
  AttackConfig local = cfg;
  local.seed = derive_seed(cfg.seed, index);
  const std::string& dummy = dataset[dummy_index(dataset.size(), index, cfg.seed)].text;
  try {
    switch (cfg.strategy) {
      case Strategy::clean: return {ex, ex.text, ex.label, {}, {}, {}, {}, 0, {}};
      case Strategy::random_label: return random_label_flip(ex, res.label_space, local.seed);
      case Strategy::synonym:
        if (!res.embeddings) throw config_error("synonym attack needs an embedding table");
        return synonym_attack(*backend, ex, local, *res.embeddings, dummy, tmpl);
      case Strategy::character: return character_attack(*backend, ex, local, *res.charset, dummy, tmpl);
      case Strategy::suffix: return suffix_attack(*backend, ex, local, backend->vocabulary(), dummy, tmpl);
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::config) throw;
    PoisonedExample passthrough{ex, ex.text, ex.label, {}, {}, {}, {}, 0, e.what()};
    return passthrough;
  }
  return {ex, ex.text, ex.label, {}, {}, {}, {}, 0, {}};
}

/// Poisons every example independently. Output order follows the input; per-example
/// failures pass the example through with `failure` set. Workers interleave by index and
/// every random stream is keyed by index, so `jobs` never changes the result.
inline PoisonRun poison_dataset(const ModelBackend* backend, const std::vector<LabeledText>& dataset,
                                const AttackConfig& cfg, const AttackResources& res, const PromptTemplate& tmpl,
                                std::size_t jobs = 1) {
  if (dataset.empty()) throw data_error("poison_dataset: empty dataset");
  cfg.validate();
  if (is_perturbation(cfg.strategy) && backend == nullptr) throw config_error("perturbation attacks need a backend");
  PoisonRun run;
  run.examples.resize(dataset.size());
  run.time_ms.resize(dataset.size());
  parallel_for(dataset.size(), jobs, [&](std::size_t, std::size_t i) {
    const auto start = std::chrono::steady_clock::now();
    run.examples[i] = poison_example(backend, dataset, i, cfg, res, tmpl);
    run.time_ms[i] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  });
  return run;
}

inline nlohmann::json poisoned_record(const PoisonedExample& p) {
  nlohmann::json j{{"text", p.text},
                   {"label", p.label},
                   {"edits", p.edits},
                   {"objective_trace", p.objective_trace},
                   {"evaluations", p.evaluations}};
  if (!p.suffix_tokens.empty()) j["suffix_tokens"] = p.suffix_tokens;
  if (!p.failure.empty()) j["failure"] = p.failure;
  return j;
}

}  // namespace poisonlab
