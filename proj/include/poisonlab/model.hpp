#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "poisonlab/common.hpp"
#include "poisonlab/vocabulary.hpp"

namespace poisonlab {

enum class BackendKind { tiny_transformer, mock_icl, char_ngram };

inline std::string_view to_string(BackendKind kind) {
  switch (kind) {
    case BackendKind::tiny_transformer: return "tiny-transformer";
    case BackendKind::mock_icl: return "mock-icl";
    case BackendKind::char_ngram: return "char-ngram";
  }
  return "?";
}

inline BackendKind parse_backend_kind(std::string_view s) {
  if (s == "tiny-transformer") return BackendKind::tiny_transformer;
  if (s == "mock-icl") return BackendKind::mock_icl;
  if (s == "char-ngram") return BackendKind::char_ngram;
  throw data_error("unknown backend kind '" + std::string(s) + "'");
}

/// Last-token representation after each of the L blocks.
struct HiddenStack {
  std::vector<std::vector<double>> layers;
  std::uint64_t source_prompt_hash = 0;

  std::size_t layer_count() const { return layers.size(); }
  std::size_t dim() const { return layers.empty() ? 0 : layers.front().size(); }
  bool operator==(const HiddenStack&) const = default;
};

inline std::uint64_t hash_tokens(std::span<const TokenId> tokens) {
  std::uint64_t h = kFnvOffset;
  for (TokenId t : tokens) h = fnv1a_u64(t, h);
  return h;
}

/// Natural-log next-token probabilities over the whole vocabulary. Entries the model
/// cannot emit (BOS for the counting backends) hold -infinity.
struct LogProbRow {
  std::vector<double> values;

  double operator[](std::size_t i) const { return values[i]; }
  std::size_t size() const { return values.size(); }

  double exp_sum() const {
    double s = 0.0;
    for (double v : values) s += std::exp(v);
    return s;
  }
};

inline LogProbRow log_softmax(std::span<const double> logits) {
  double max = -std::numeric_limits<double>::infinity();
  for (double v : logits) max = std::max(max, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - max);
  const double log_z = max + std::log(sum);
  LogProbRow row;
  row.values.reserve(logits.size());
  for (double v : logits) row.values.push_back(v - log_z);
  return row;
}

class ModelBackend;

/// Single-threaded evaluation context over an immutable backend. Backends that can
/// reuse work across calls sharing a token prefix do so here; results are always
/// identical to the stateless calls on ModelBackend.
class EvalSession {
 public:
  virtual ~EvalSession() = default;
  virtual HiddenStack hidden(std::span<const TokenId> tokens) = 0;
  /// log p(continuation[i] | prefix, continuation[<i]) for every i.
  virtual std::vector<double> continuation_logprobs(std::span<const TokenId> prefix,
                                                    std::span<const TokenId> continuation) = 0;
  /// Number of forward evaluations served so far (hidden + logprob calls).
  std::uint64_t evaluations() const { return evaluations_; }

 protected:
  std::uint64_t evaluations_ = 0;
};

/// Maps token sequences to per-layer hidden vectors and next-token log-probabilities.
/// Implementations are immutable after construction and safe to query concurrently.
class ModelBackend {
 public:
  ModelBackend(std::string name, Vocabulary vocab) : name_(std::move(name)), vocab_(std::move(vocab)) {}
  virtual ~ModelBackend() = default;
  ModelBackend(const ModelBackend&) = delete;
  ModelBackend& operator=(const ModelBackend&) = delete;

  virtual BackendKind kind() const = 0;
  virtual std::size_t layer_count() const = 0;
  virtual std::size_t hidden_dim() const = 0;
  virtual HiddenStack forward_hidden(std::span<const TokenId> tokens) const = 0;
  virtual LogProbRow next_token_logprobs(std::span<const TokenId> tokens) const = 0;

  virtual std::vector<double> continuation_logprobs(std::span<const TokenId> prefix,
                                                    std::span<const TokenId> continuation) const {
    std::vector<TokenId> seq(prefix.begin(), prefix.end());
    std::vector<double> out;
    out.reserve(continuation.size());
    for (TokenId t : continuation) {
      out.push_back(next_token_logprobs(seq)[t]);
      seq.push_back(t);
    }
    return out;
  }

  virtual std::unique_ptr<EvalSession> open_session() const;

  const Vocabulary& vocabulary() const { return vocab_; }
  /// Manifest name, used to tag results in transfer experiments.
  const std::string& name() const { return name_; }

  Tokenization tokenize(std::string_view text) const { return vocab_.tokenize(text); }

 protected:
  void check_tokens(std::span<const TokenId> tokens) const {
    if (tokens.empty()) throw runtime_error(name_ + ": empty token sequence");
    for (TokenId t : tokens) {
      if (t >= vocab_.size())
        throw runtime_error(name_ + ": token id " + std::to_string(t) + " outside vocabulary of size " +
                            std::to_string(vocab_.size()));
    }
  }

 private:
  std::string name_;
  Vocabulary vocab_;
};

namespace detail {
class StatelessSession final : public EvalSession {
 public:
  explicit StatelessSession(const ModelBackend& backend) : backend_(backend) {}
  HiddenStack hidden(std::span<const TokenId> tokens) override {
    ++evaluations_;
    return backend_.forward_hidden(tokens);
  }
  std::vector<double> continuation_logprobs(std::span<const TokenId> prefix,
                                            std::span<const TokenId> continuation) override {
    ++evaluations_;
    return backend_.continuation_logprobs(prefix, continuation);
  }

 private:
  const ModelBackend& backend_;
};
}  // namespace detail

inline std::unique_ptr<EvalSession> ModelBackend::open_session() const {
  return std::make_unique<detail::StatelessSession>(*this);
}

}  // namespace poisonlab
