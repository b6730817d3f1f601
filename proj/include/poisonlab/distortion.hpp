#pragma once

// Hidden-state distortion between a clean example and a perturbed one.
//
//   l_d(h1, h2) = || h1/||h1|| - h2/||h2|| ||_2        (normalize(0) := 0)
//   L_d(H1, H2) = min over layers of l_d
//
// Both stacks come from probe prompts "x -> y, dummy query ->" rendered through the
// same template, label and dummy query; only the example input differs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "poisonlab/model.hpp"
#include "poisonlab/prompt_template.hpp"
#include "poisonlab/text_units.hpp"

namespace poisonlab {

inline std::vector<double> unit_vector(std::span<const double> h) {
  double n = 0.0;
  for (double v : h) n += v * v;
  std::vector<double> out(h.begin(), h.end());
  if (n == 0.0) {
    std::fill(out.begin(), out.end(), 0.0);
    return out;
  }
  n = std::sqrt(n);
  for (double& v : out) v /= n;
  return out;
}

inline double layer_distance(std::span<const double> h1, std::span<const double> h2) {
  if (h1.size() != h2.size())
    throw runtime_error("layer_distance: dimension mismatch (" + std::to_string(h1.size()) + " vs " +
                        std::to_string(h2.size()) + ")");
  const auto u1 = unit_vector(h1);
  const auto u2 = unit_vector(h2);
  double s = 0.0;
  for (std::size_t i = 0; i < u1.size(); ++i) {
    const double diff = u1[i] - u2[i];
    s += diff * diff;
  }
  // Rounding can push |u1 - u2| a hair past 2 for antipodal inputs.
  return std::min(std::sqrt(s), 2.0);
}

struct DistortionScore {
  std::vector<double> per_layer;
  double aggregate = 0.0;
};

inline DistortionScore distortion(const HiddenStack& a, const HiddenStack& b) {
  if (a.layer_count() != b.layer_count())
    throw runtime_error("distortion: stacks have " + std::to_string(a.layer_count()) + " and " +
                        std::to_string(b.layer_count()) + " layers");
  if (a.layer_count() == 0) throw runtime_error("distortion: empty hidden stacks");
  DistortionScore out;
  out.aggregate = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < a.layer_count(); ++l) {
    out.per_layer.push_back(layer_distance(a.layers[l], b.layers[l]));
    out.aggregate = std::min(out.aggregate, out.per_layer.back());
  }
  return out;
}

struct ProbePrompt {
  LabeledText example;
  std::string dummy_query;
  std::string rendered;
  std::vector<TokenId> tokens;
};

inline ProbePrompt build_probe_prompt(const LabeledText& example, std::string_view dummy_query,
                                      const PromptTemplate& tmpl, const Vocabulary& vocab) {
  ProbePrompt p{example, std::string(dummy_query), tmpl.render({example}, dummy_query), {}};
  p.tokens = vocab.tokenize(p.rendered).ids;
  return p;
}

/// The attack objective for one example: distortion between the probe prompt of the
/// clean input and the probe prompt of a candidate input. Clean hidden states are
/// computed once; candidates go through a single EvalSession so prefix work is shared.
/// Not thread-safe; use one instance per worker.
class ProbeObjective {
 public:
  ProbeObjective(const ModelBackend& backend, LabeledText example, std::string dummy_query, PromptTemplate tmpl)
      : backend_(backend), example_(std::move(example)), dummy_(std::move(dummy_query)), template_(std::move(tmpl)),
        session_(backend.open_session()) {
    clean_ = session_->hidden(probe_tokens(example_.text));
  }

  std::vector<TokenId> probe_tokens(std::string_view input) const {
    return backend_.vocabulary().tokenize(template_.render({{std::string(input), example_.label}}, dummy_)).ids;
  }

  /// Full per-layer breakdown for a candidate input.
  DistortionScore score(std::string_view candidate_input) {
    return distortion(clean_, session_->hidden(probe_tokens(candidate_input)));
  }

  double operator()(std::string_view candidate_input) { return score(candidate_input).aggregate; }

  const HiddenStack& clean_hidden() const { return clean_; }
  const LabeledText& example() const { return example_; }
  const std::string& dummy_query() const { return dummy_; }
  std::uint64_t evaluations() const { return session_->evaluations(); }

 private:
  const ModelBackend& backend_;
  LabeledText example_;
  std::string dummy_;
  PromptTemplate template_;
  std::unique_ptr<EvalSession> session_;
  HiddenStack clean_;
};

/// Stateless form of the objective, recomputed from scratch.
inline double objective(const ModelBackend& backend, const LabeledText& example, std::string_view perturbed_text,
                        std::string_view dummy_query, const PromptTemplate& tmpl) {
  const auto& vocab = backend.vocabulary();
  const auto clean = build_probe_prompt(example, dummy_query, tmpl, vocab);
  const auto pert = build_probe_prompt({std::string(perturbed_text), example.label}, dummy_query, tmpl, vocab);
  return distortion(backend.forward_hidden(clean.tokens), backend.forward_hidden(pert.tokens)).aggregate;
}

enum class Granularity { word, character };

/// I_i = objective(text with unit i deleted). Words are deleted with one adjacent
/// separator run (see WordSegmentation::without_word).
inline std::vector<double> importance_scores(ProbeObjective& obj, Granularity g) {
  const std::string& text = obj.example().text;
  std::vector<double> scores;
  if (g == Granularity::word) {
    const auto seg = split_words(text);
    if (seg.size() == 0) throw data_error("importance_scores: text has no words");
    for (std::size_t i = 0; i < seg.size(); ++i) scores.push_back(obj(seg.without_word(i)));
  } else {
    const auto chars = enumerate_chars(text);
    if (chars.empty()) throw data_error("importance_scores: empty text");
    for (const auto& c : chars) scores.push_back(obj(without_char(text, c.offset)));
  }
  return scores;
}

inline std::vector<double> importance_scores(const ModelBackend& backend, const LabeledText& example,
                                             std::string_view dummy_query, const PromptTemplate& tmpl, Granularity g) {
  ProbeObjective obj(backend, example, std::string(dummy_query), tmpl);
  return importance_scores(obj, g);
}

/// Indices of the `k` highest scores among `eligible` positions, descending, ties by
/// lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k,
                                              std::span<const std::size_t> eligible) {
  std::vector<std::size_t> idx(eligible.begin(), eligible.end());
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  if (idx.size() > k) idx.resize(k);
  return idx;
}

inline std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> all(scores.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return top_k_indices(scores, k, all);
}

}  // namespace poisonlab
