#pragma once

// Counting language model over vocabulary tokens with add-one smoothing:
//
//   p(w | c) = (count(c, w) + 1) / (count(c) + |V \ {BOS}|),   w != BOS
//
// The context c is the previous (order - 1) tokens, or fewer near the start of a
// sequence (the BOS token then begins the context). BOS is never predicted. Order 1 with
// an empty corpus is the uniform model. The hidden stack is a single layer holding the
// next-token probability vector.

#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "poisonlab/model.hpp"

namespace poisonlab {

class CharNgramModel final : public ModelBackend {
 public:
  CharNgramModel(std::string name, Vocabulary vocab, std::size_t order, const std::vector<std::string>& corpus)
      : ModelBackend(std::move(name), std::move(vocab)), order_(order) {
    if (order_ < 1) throw data_error("char-ngram order must be >= 1");
    if (vocabulary().size() < 2) throw data_error("char-ngram vocabulary has no predictable tokens");
    for (const auto& line : corpus) {
      const auto ids = vocabulary().tokenize(line).ids;
      for (std::size_t t = 1; t < ids.size(); ++t) {
        auto& entry = counts_[context_of(ids, t)];
        ++entry.total;
        ++entry.next[ids[t]];
      }
    }
  }

  BackendKind kind() const override { return BackendKind::char_ngram; }
  std::size_t layer_count() const override { return 1; }
  std::size_t hidden_dim() const override { return vocabulary().size(); }
  std::size_t order() const { return order_; }

  LogProbRow next_token_logprobs(std::span<const TokenId> tokens) const override {
    check_tokens(tokens);
    return row_for(context_of(tokens, tokens.size()));
  }

  HiddenStack forward_hidden(std::span<const TokenId> tokens) const override {
    const LogProbRow row = next_token_logprobs(tokens);
    HiddenStack out;
    out.source_prompt_hash = hash_tokens(tokens);
    out.layers.emplace_back();
    for (double v : row.values) out.layers.back().push_back(std::exp(v));
    return out;
  }

  std::vector<double> continuation_logprobs(std::span<const TokenId> prefix,
                                            std::span<const TokenId> continuation) const override {
    check_tokens(prefix);
    std::vector<TokenId> seq(prefix.begin(), prefix.end());
    seq.insert(seq.end(), continuation.begin(), continuation.end());
    std::vector<double> out;
    out.reserve(continuation.size());
    for (std::size_t i = 0; i < continuation.size(); ++i) {
      const std::size_t t = prefix.size() + i;
      out.push_back(log_prob(context_of(seq, t), seq[t]));
    }
    return out;
  }

  double log_prob(const std::vector<TokenId>& context, TokenId next) const {
    if (next == vocabulary().bos()) return -std::numeric_limits<double>::infinity();
    const double support = static_cast<double>(vocabulary().size() - 1);
    const auto it = counts_.find(context);
    double num = 1.0, den = support;
    if (it != counts_.end()) {
      den += static_cast<double>(it->second.total);
      const auto n = it->second.next.find(next);
      if (n != it->second.next.end()) num += static_cast<double>(n->second);
    }
    return std::log(num) - std::log(den);
  }

 private:
  struct Counts {
    std::uint64_t total = 0;
    std::map<TokenId, std::uint64_t> next;
  };

  std::vector<TokenId> context_of(std::span<const TokenId> ids, std::size_t t) const {
    const std::size_t width = std::min(order_ - 1, t);
    return {ids.begin() + static_cast<std::ptrdiff_t>(t - width), ids.begin() + static_cast<std::ptrdiff_t>(t)};
  }

  LogProbRow row_for(const std::vector<TokenId>& context) const {
    LogProbRow row;
    row.values.resize(vocabulary().size());
    for (std::size_t i = 0; i < row.values.size(); ++i) row.values[i] = log_prob(context, static_cast<TokenId>(i));
    return row;
  }

  std::size_t order_;
  std::map<std::vector<TokenId>, Counts> counts_;
};

}  // namespace poisonlab
