#pragma once

// Analytic stand-in for an ICL-capable model.
//
// Hidden state, layer l (1-based): byte n-gram counts of the detokenized prompt with n = l,
// hashed into `dim` buckets (FNV-1a seeded by (seed, l)) and L2-normalized. A text shorter
// than l yields the zero vector.
//
// Next-token distribution: the prompt is split at its last answer delimiter into a rendered
// demonstration and a partial answer. The demonstration whose input has the highest
// layer-L cosine similarity with the query (first one on ties) supplies the predicted
// label; the next token of that label receives probability 1 - kEpsilon and the remaining
// mass is spread evenly over the other non-BOS tokens. Anything that does not parse, or a
// partial answer that has left the predicted label, gets the uniform distribution.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "poisonlab/model.hpp"
#include "poisonlab/prompt_template.hpp"

namespace poisonlab {

class MockIclModel final : public ModelBackend {
 public:
  static constexpr double kEpsilon = 1e-6;

  MockIclModel(std::string name, Vocabulary vocab, std::size_t layers, std::size_t dim, std::uint64_t seed,
               PromptTemplate tmpl)
      : ModelBackend(std::move(name), std::move(vocab)), layers_(layers), dim_(dim), seed_(seed),
        template_(std::move(tmpl)) {
    if (layers_ < 1 || dim_ < 1) throw data_error("mock-icl needs layers >= 1 and dim >= 1");
    if (vocabulary().size() < 4) throw data_error("mock-icl needs at least two non-special tokens");
  }

  BackendKind kind() const override { return BackendKind::mock_icl; }
  std::size_t layer_count() const override { return layers_; }
  std::size_t hidden_dim() const override { return dim_; }
  std::uint64_t seed() const { return seed_; }
  const PromptTemplate& prompt_template() const { return template_; }

  /// L2-normalized hashed n-gram profile of `text`.
  std::vector<double> ngram_profile(std::string_view text, std::size_t n) const {
    std::vector<double> v(dim_, 0.0);
    if (text.size() >= n) {
      const std::uint64_t basis = fnv1a_u64(n, fnv1a_u64(seed_));
      for (std::size_t i = 0; i + n <= text.size(); ++i) v[fnv1a(text.substr(i, n), basis) % dim_] += 1.0;
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    if (norm > 0.0) {
      norm = std::sqrt(norm);
      for (double& x : v) x /= norm;
    }
    return v;
  }

  HiddenStack forward_hidden(std::span<const TokenId> tokens) const override {
    check_tokens(tokens);
    const std::string text = vocabulary().detokenize(tokens);
    HiddenStack out;
    out.source_prompt_hash = hash_tokens(tokens);
    for (std::size_t l = 1; l <= layers_; ++l) out.layers.push_back(ngram_profile(text, l));
    return out;
  }

  /// Label the mock would emit for a rendered prompt; nullopt when it does not parse.
  std::optional<std::string> predicted_label(std::string_view rendered_prompt) const {
    const auto parsed = template_.parse(rendered_prompt);
    if (!parsed || parsed->shots.empty()) return std::nullopt;
    const auto query = ngram_profile(parsed->query, layers_);
    std::size_t best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < parsed->shots.size(); ++i) {
      const auto demo = ngram_profile(parsed->shots[i].text, layers_);
      double sim = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) sim += demo[j] * query[j];
      if (sim > best_sim) {
        best_sim = sim;
        best = i;
      }
    }
    return parsed->shots[best].label;
  }

  LogProbRow next_token_logprobs(std::span<const TokenId> tokens) const override {
    check_tokens(tokens);
    const Vocabulary& vocab = vocabulary();
    const std::string text = vocab.detokenize(tokens);
    const auto& delim = template_.answer_delimiter();
    const auto cut = text.rfind(delim);
    std::optional<TokenId> target;
    if (cut != std::string::npos) {
      const std::string_view head(text.data(), cut + delim.size());
      const std::string_view partial(text.data() + head.size(), text.size() - head.size());
      if (const auto label = predicted_label(head)) {
        const std::string full = *label + template_.shot_separator() + template_.input_prefix();
        const auto ids = vocab.tokenize(full, false).ids;
        std::string so_far;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (so_far == partial) {
            target = ids[i];
            break;
          }
          if (so_far.size() >= partial.size()) break;
          so_far += vocab.token(ids[i]);
        }
      }
    }
    const double support = static_cast<double>(vocab.size() - 1);
    LogProbRow row;
    row.values.assign(vocab.size(), 0.0);
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      if (static_cast<TokenId>(i) == vocab.bos()) {
        row.values[i] = -std::numeric_limits<double>::infinity();
      } else if (!target) {
        row.values[i] = -std::log(support);
      } else if (static_cast<TokenId>(i) == *target) {
        row.values[i] = std::log1p(-kEpsilon);
      } else {
        row.values[i] = std::log(kEpsilon / (support - 1.0));
      }
    }
    return row;
  }

 private:
  std::size_t layers_, dim_;
  std::uint64_t seed_;
  PromptTemplate template_;
};

}  // namespace poisonlab
