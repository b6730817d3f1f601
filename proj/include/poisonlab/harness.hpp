#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "poisonlab/common.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/prompt_template.hpp"

namespace poisonlab {

enum class Provenance { clean, poisoned };

inline std::string_view to_string(Provenance p) { return p == Provenance::clean ? "clean" : "poisoned"; }

inline Provenance parse_provenance(std::string_view s) {
  if (s == "clean") return Provenance::clean;
  if (s == "poisoned") return Provenance::poisoned;
  throw data_error("unknown provenance '" + std::string(s) + "'");
}

struct PromptSet {
  std::vector<LabeledText> items;
  std::vector<Provenance> provenance;

  static PromptSet clean(std::vector<LabeledText> items) {
    PromptSet s;
    s.provenance.assign(items.size(), Provenance::clean);
    s.items = std::move(items);
    return s;
  }

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  std::size_t poisoned_count() const {
    return static_cast<std::size_t>(std::count(provenance.begin(), provenance.end(), Provenance::poisoned));
  }
  bool operator==(const PromptSet&) const = default;

  /// One JSON object per line: {"label", "provenance", "text"}.
  std::string serialize() const {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
      nlohmann::json j{{"text", items[i].text}, {"label", items[i].label},
                       {"provenance", std::string(to_string(provenance[i]))}};
      out += j.dump() + "\n";
    }
    return out;
  }

  std::string digest() const { return digest_of(serialize()); }
};

inline std::string assemble_prompt(const std::vector<LabeledText>& shots, std::string_view query,
                                   const PromptTemplate& tmpl) {
  if (shots.empty()) throw data_error("assemble_prompt: at least one shot is required");
  return tmpl.render(shots, query);
}

/// Tokens of a label as a continuation (no BOS).
inline std::vector<TokenId> label_tokens(const Vocabulary& vocab, std::string_view label) {
  auto ids = vocab.tokenize(label, false).ids;
  if (ids.empty()) throw data_error("label '" + std::string(label) + "' has an empty token sequence");
  return ids;
}

/// Summed teacher-forced log-probability of each label after the prompt.
inline std::vector<double> label_scores(EvalSession& session, const Vocabulary& vocab, std::string_view prompt,
                                        const std::vector<std::string>& labels) {
  const auto prefix = vocab.tokenize(prompt).ids;
  std::vector<double> scores;
  scores.reserve(labels.size());
  for (const auto& label : labels) {
    const auto lp = session.continuation_logprobs(prefix, label_tokens(vocab, label));
    scores.push_back(std::accumulate(lp.begin(), lp.end(), 0.0));
  }
  return scores;
}

inline std::size_t best_label(const std::vector<double>& scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

inline std::string predict_label(const ModelBackend& backend, std::string_view prompt,
                                 const std::vector<std::string>& labels) {
  if (labels.empty()) throw data_error("predict_label: empty label space");
  auto session = backend.open_session();
  return labels[best_label(label_scores(*session, backend.vocabulary(), prompt, labels))];
}

struct EvalConfig {
  std::size_t shots = 5;
  std::size_t runs = 5;
  std::uint64_t seed = 0;
  PromptTemplate tmpl = PromptTemplate::default_template();
  std::vector<std::string> labels;
};

struct EvalResult {
  std::string backend;
  std::string surrogate;  // set by transfer_eval
  std::string template_name;
  std::size_t shots = 0;
  std::size_t runs = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracies;
  double mean = 0.0;
  double stderr_ = 0.0;
  std::string config_digest;

  nlohmann::json to_json() const {
    nlohmann::json j{{"backend", backend},   {"template", template_name}, {"shots", shots},
                     {"runs", runs},         {"seeds", seeds},            {"accuracies", accuracies},
                     {"mean", mean},         {"stderr", stderr_},         {"config_digest", config_digest}};
    if (!surrogate.empty()) j["surrogate"] = surrogate;
    return j;
  }

  static EvalResult from_json(const nlohmann::json& j) {
    EvalResult r;
    r.backend = j.at("backend").get<std::string>();
    r.surrogate = j.value("surrogate", std::string());
    r.template_name = j.at("template").get<std::string>();
    r.shots = j.at("shots").get<std::size_t>();
    r.runs = j.at("runs").get<std::size_t>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.accuracies = j.at("accuracies").get<std::vector<double>>();
    r.mean = j.at("mean").get<double>();
    r.stderr_ = j.at("stderr").get<double>();
    r.config_digest = j.at("config_digest").get<std::string>();
    return r;
  }

  std::string serialize() const { return to_json().dump(2) + "\n"; }
};

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
};

/// Mean and standard error (sample standard deviation / sqrt(n)); stderr is 0 for n < 2.
inline MeanStderr mean_stderr(const std::vector<double>& xs) {
  MeanStderr out;
  if (xs.empty()) return out;
  const double n = static_cast<double>(xs.size());
  out.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  if (xs.size() < 2) return out;
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  out.stderr_ = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  return out;
}

/// Pool indices for one demonstration: `shots` draws without replacement, in draw order.
inline std::vector<std::size_t> sample_shots(std::size_t pool_size, std::size_t shots, std::uint64_t seed) {
  std::vector<std::size_t> idx(pool_size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < shots; ++i) std::swap(idx[i], idx[i + uniform_index(rng, pool_size - i)]);
  idx.resize(shots);
  return idx;
}

inline std::vector<std::string> label_space_of(const std::vector<LabeledText>& a, const std::vector<LabeledText>& b = {}) {
  std::vector<std::string> labels;
  for (const auto* set : {&a, &b})
    for (const auto& e : *set) labels.push_back(e.label);
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  return labels;
}

inline std::string eval_config_digest(const ModelBackend& backend, const PromptSet& pool,
                                      const std::vector<LabeledText>& test, const EvalConfig& cfg) {
  std::string test_bytes;
  for (const auto& t : test) test_bytes += nlohmann::json{{"text", t.text}, {"label", t.label}}.dump() + "\n";
  nlohmann::json j{{"backend", backend.name()},     {"pool", pool.digest()},          {"test", digest_of(test_bytes)},
                   {"shots", cfg.shots},            {"runs", cfg.runs},               {"seed", cfg.seed},
                   {"template", cfg.tmpl.pattern()}, {"labels", cfg.labels}};
  return digest_of(j.dump());
}

/// Accuracy of `backend` on `test` with demonstrations drawn from `pool`. Run r uses seed
/// seed + r; item i of run r samples its shots from derive_seed(seed + r, i).
inline EvalResult evaluate_icl(const ModelBackend& backend, const PromptSet& pool,
                               const std::vector<LabeledText>& test, EvalConfig cfg, std::size_t jobs = 1) {
  if (cfg.shots < 1) throw config_error("shots must be >= 1");
  if (cfg.runs < 1) throw config_error("runs must be >= 1");
  if (pool.size() < cfg.shots)
    throw data_error("pool of " + std::to_string(pool.size()) + " examples is smaller than shots = " +
                     std::to_string(cfg.shots));
  if (test.empty()) throw data_error("evaluate_icl: empty test set");
  if (cfg.labels.empty()) cfg.labels = label_space_of(pool.items, test);

  EvalResult result;
  result.backend = backend.name();
  result.template_name = cfg.tmpl.name();
  result.shots = cfg.shots;
  result.runs = cfg.runs;
  result.config_digest = eval_config_digest(backend, pool, test, cfg);

  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, test.size()));
  std::vector<std::unique_ptr<EvalSession>> sessions;
  for (std::size_t w = 0; w < workers; ++w) sessions.push_back(backend.open_session());

  for (std::size_t r = 0; r < cfg.runs; ++r) {
    const std::uint64_t run_seed = cfg.seed + r;
    std::vector<char> correct(test.size(), 0);
    parallel_for(test.size(), workers, [&](std::size_t w, std::size_t i) {
      std::vector<LabeledText> shots;
      for (std::size_t k : sample_shots(pool.size(), cfg.shots, derive_seed(run_seed, i)))
        shots.push_back(pool.items[k]);
      const std::string prompt = assemble_prompt(shots, test[i].text, cfg.tmpl);
      const auto scores = label_scores(*sessions[w], backend.vocabulary(), prompt, cfg.labels);
      correct[i] = cfg.labels[best_label(scores)] == test[i].label;
    });
    result.seeds.push_back(run_seed);
    result.accuracies.push_back(static_cast<double>(std::count(correct.begin(), correct.end(), 1)) /
                                static_cast<double>(test.size()));
  }
  const auto ms = mean_stderr(result.accuracies);
  result.mean = ms.mean;
  result.stderr_ = ms.stderr_;
  return result;
}

/// Replaces exactly floor(rate * N + 1/2) examples by their poisoned counterparts. The
/// replaced indices are a prefix of one seeded shuffle, so for a fixed seed the poisoned
/// sets of increasing rates are nested.
inline PromptSet mix_poison(const PromptSet& clean, const PromptSet& poisoned, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw config_error("poison rate must lie in [0, 1]");
  if (clean.size() != poisoned.size())
    throw data_error("mix_poison: clean pool has " + std::to_string(clean.size()) + " examples, poisoned has " +
                     std::to_string(poisoned.size()));
  const std::size_t n = clean.size();
  const auto count = std::min(n, static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 0.5)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i + 1 < n; ++i) std::swap(order[i], order[i + uniform_index(rng, n - i)]);
  PromptSet out = clean;
  for (std::size_t i = 0; i < count; ++i) {
    out.items[order[i]] = poisoned.items[order[i]];
    out.provenance[order[i]] = Provenance::poisoned;
  }
  return out;
}

/// evaluate_icl on a pool that was poisoned against `surrogate_name`; texts are the
/// transfer medium, so the target tokenizes them with its own vocabulary.
inline EvalResult transfer_eval(const PromptSet& surrogate_poisoned_pool, const std::string& surrogate_name,
                                const ModelBackend& target, const std::vector<LabeledText>& test,
                                const EvalConfig& cfg, std::size_t jobs = 1) {
  EvalResult r = evaluate_icl(target, surrogate_poisoned_pool, test, cfg, jobs);
  r.surrogate = surrogate_name;
  return r;
}

}  // namespace poisonlab
