#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "poisonlab/common.hpp"
#include "poisonlab/harness.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/text_units.hpp"

namespace poisonlab {

/// Mean of -log p(token_t | tokens_<t) over every non-BOS token of the text.
inline double perplexity_score(const ModelBackend& scorer, std::string_view text) {
  const auto ids = scorer.vocabulary().tokenize(text).ids;
  if (ids.size() < 2) throw data_error("perplexity_score: text has no tokens to score");
  const std::span<const TokenId> all(ids);
  const auto lp = scorer.continuation_logprobs(all.first(1), all.subspan(1));
  // Running mean: a constant per-token loss comes back bit-exact.
  double mean = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) mean += (-lp[i] - mean) / static_cast<double>(i + 1);
  return mean;
}

struct PerplexityReport {
  std::vector<double> scores;
  double mean = 0.0;
  double stderr_ = 0.0;

  nlohmann::json to_json() const { return {{"scores", scores}, {"mean", mean}, {"stderr", stderr_}}; }
};

inline PerplexityReport perplexity_report(const ModelBackend& scorer, const std::vector<LabeledText>& texts,
                                          std::size_t jobs = 1) {
  PerplexityReport r;
  r.scores.resize(texts.size());
  parallel_for(texts.size(), jobs,
               [&](std::size_t, std::size_t i) { r.scores[i] = perplexity_score(scorer, texts[i].text); });
  const auto ms = mean_stderr(r.scores);
  r.mean = ms.mean;
  r.stderr_ = ms.stderr_;
  return r;
}

/// Linear interpolation between closest ranks: position q * (n - 1) in the sorted values.
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw data_error("quantile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

struct Rejection {
  std::size_t index = 0;
  double score = 0.0;
  double threshold = 0.0;
};

struct FilterResult {
  PromptSet kept;
  std::vector<Rejection> rejected;
  std::vector<double> scores;
  double threshold = 0.0;

  std::string rejection_lines() const {
    std::string out;
    for (const auto& r : rejected)
      out += nlohmann::json{{"index", r.index}, {"score", r.score}, {"threshold", r.threshold}}.dump() + "\n";
    return out;
  }
};

/// Rejects every member scoring above the `q` quantile of the clean-provenance scores
/// (or of the whole pool when no member is marked clean).
inline FilterResult perplexity_filter(const PromptSet& pool, const ModelBackend& scorer, double q,
                                      std::size_t jobs = 1) {
  if (pool.empty()) throw data_error("perplexity_filter: empty pool");
  if (!(q > 0.0 && q <= 1.0)) throw config_error("filter quantile must lie in (0, 1]");
  FilterResult out;
  out.scores = perplexity_report(scorer, pool.items, jobs).scores;
  std::vector<double> reference;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool.provenance[i] == Provenance::clean) reference.push_back(out.scores[i]);
  if (reference.empty()) reference = out.scores;
  out.threshold = quantile(reference, q);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (out.scores[i] > out.threshold) {
      out.rejected.push_back({i, out.scores[i], out.threshold});
    } else {
      out.kept.items.push_back(pool.items[i]);
      out.kept.provenance.push_back(pool.provenance[i]);
    }
  }
  return out;
}

struct ParaphraserHook {
  std::string name;
  std::function<std::string(std::string_view)> rewrite;
};

inline ParaphraserHook identity_paraphraser() {
  return {"identity", [](std::string_view s) { return std::string(s); }};
}

/// Drops everything after the last '.', '!' or '?'; texts without one are unchanged.
inline ParaphraserHook sentence_end_stripper() {
  return {"strip-after-sentence-end", [](std::string_view s) {
            const auto end = s.find_last_of(".!?");
            if (end == std::string_view::npos) return std::string(s);
            return std::string(s.substr(0, end + 1));
          }};
}

inline ParaphraserHook paraphraser_by_name(std::string_view name) {
  if (name == "identity") return identity_paraphraser();
  if (name == "strip-after-sentence-end") return sentence_end_stripper();
  throw config_error("unknown paraphraser '" + std::string(name) + "'");
}

inline PromptSet apply_paraphrase(const PromptSet& pool, const ParaphraserHook& hook) {
  if (!hook.rewrite) throw config_error("paraphraser '" + hook.name + "' has no rewrite function");
  PromptSet out = pool;
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::string rewritten = hook.rewrite(out.items[i].text);
    if (const auto bad = text_domain_violation(rewritten); !bad.empty())
      throw data_error("paraphraser '" + hook.name + "' output for example " + std::to_string(i) + ": " + bad);
    out.items[i].text = std::move(rewritten);
  }
  return out;
}

}  // namespace poisonlab
