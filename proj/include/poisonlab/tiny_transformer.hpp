#pragma once

// Pre-norm decoder-only transformer, evaluated in double precision.
//
//   x_0[t]   = tok_emb[token_t] + pos_emb[t]
//   a        = LN1(x)                       LN(z) = (z - mean) / sqrt(var + 1e-5) * w + b
//   q,k,v    = a Wq + bq, a Wk + bk, a Wv + bv        (matrices stored [in][out])
//   per head h (dh = d / heads), causal over s <= t:
//     att[t,s] = softmax_s( q_h[t] . k_h[s] / sqrt(dh) )
//   x       += concat_h(sum_s att[t,s] v_h[s]) Wo + bo
//   x       += GELU(LN2(x) W1 + b1) W2 + b2           GELU(z) = z/2 (1 + erf(z / sqrt 2))
//   logits   = LN_f(x_L[t]) tok_emb^T                 (tied output projection)
//
// The hidden stack holds x_1..x_L at the final position: post-block residuals, before
// the final layer norm. Embedding output x_0 is not part of it.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "poisonlab/common.hpp"
#include "poisonlab/model.hpp"
#include "poisonlab/tensor_container.hpp"

namespace poisonlab {

struct TransformerShape {
  std::size_t vocab = 0;
  std::size_t dim = 0;
  std::size_t heads = 1;
  std::size_t layers = 1;
  std::size_t context = 1024;

  std::size_t mlp_dim() const { return 4 * dim; }
};

class TinyTransformer final : public ModelBackend {
 public:
  static constexpr double kLayerNormEps = 1e-5;

  TinyTransformer(std::string name, Vocabulary vocab, TransformerShape shape, const TensorContainer& weights)
      : ModelBackend(std::move(name), std::move(vocab)), shape_(shape) {
    if (shape_.layers < 1 || shape_.dim < 1) throw data_error("tiny-transformer needs layers >= 1 and dim >= 1");
    if (shape_.heads < 1 || shape_.dim % shape_.heads != 0)
      throw data_error("tiny-transformer: dim must be a multiple of heads");
    if (shape_.vocab != vocabulary().size())
      throw data_error("tiny-transformer: manifest vocabulary size does not match vocabulary file");
    const std::size_t d = shape_.dim, m = shape_.mlp_dim();
    tok_emb_ = load(weights, "tok_emb", {shape_.vocab, d});
    pos_emb_ = load(weights, "pos_emb", {shape_.context, d});
    for (std::size_t l = 0; l < shape_.layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      Block b;
      b.ln1_w = load(weights, p + "ln1.weight", {d});
      b.ln1_b = load(weights, p + "ln1.bias", {d});
      b.wq = load(weights, p + "attn.wq", {d, d});
      b.bq = load(weights, p + "attn.bq", {d});
      b.wk = load(weights, p + "attn.wk", {d, d});
      b.bk = load(weights, p + "attn.bk", {d});
      b.wv = load(weights, p + "attn.wv", {d, d});
      b.bv = load(weights, p + "attn.bv", {d});
      b.wo = load(weights, p + "attn.wo", {d, d});
      b.bo = load(weights, p + "attn.bo", {d});
      b.ln2_w = load(weights, p + "ln2.weight", {d});
      b.ln2_b = load(weights, p + "ln2.bias", {d});
      b.w1 = load(weights, p + "mlp.w1", {d, m});
      b.b1 = load(weights, p + "mlp.b1", {m});
      b.w2 = load(weights, p + "mlp.w2", {m, d});
      b.b2 = load(weights, p + "mlp.b2", {d});
      blocks_.push_back(std::move(b));
    }
    lnf_w_ = load(weights, "ln_f.weight", {d});
    lnf_b_ = load(weights, "ln_f.bias", {d});
    const std::size_t expected = 4 + 16 * shape_.layers;
    if (weights.size() != expected)
      throw data_error("tiny-transformer: container holds " + std::to_string(weights.size()) +
                       " tensors, manifest implies " + std::to_string(expected));
  }

  /// Seeded random weights. Projections are drawn with std 1/sqrt(fan_in); layer-norm
  /// gains sit near 1 and biases near 0.
  static TensorContainer random_weights(const TransformerShape& shape, std::uint64_t seed) {
    Rng rng(seed);
    TensorContainer c;
    const std::size_t d = shape.dim, m = shape.mlp_dim();
    auto gaussian = [&](const std::string& name, std::vector<std::size_t> dims, double mean, double stddev) {
      Tensor t;
      t.shape = std::move(dims);
      t.data.resize(t.element_count());
      for (auto& v : t.data) v = static_cast<float>(mean + stddev * standard_normal(rng));
      c.put(name, std::move(t));
    };
    const double proj = 1.0 / std::sqrt(static_cast<double>(d));
    gaussian("tok_emb", {shape.vocab, d}, 0.0, 1.0);
    gaussian("pos_emb", {shape.context, d}, 0.0, 0.3);
    for (std::size_t l = 0; l < shape.layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      gaussian(p + "ln1.weight", {d}, 1.0, 0.1);
      gaussian(p + "ln1.bias", {d}, 0.0, 0.02);
      for (const char* w : {"wq", "wk", "wv", "wo"}) {
        gaussian(p + "attn." + w, {d, d}, 0.0, proj);
        gaussian(p + "attn.b" + std::string(w + 1), {d}, 0.0, 0.02);
      }
      gaussian(p + "ln2.weight", {d}, 1.0, 0.1);
      gaussian(p + "ln2.bias", {d}, 0.0, 0.02);
      gaussian(p + "mlp.w1", {d, m}, 0.0, proj);
      gaussian(p + "mlp.b1", {m}, 0.0, 0.02);
      gaussian(p + "mlp.w2", {m, d}, 0.0, 1.0 / std::sqrt(static_cast<double>(m)));
      gaussian(p + "mlp.b2", {d}, 0.0, 0.02);
    }
    gaussian("ln_f.weight", {d}, 1.0, 0.1);
    gaussian("ln_f.bias", {d}, 0.0, 0.02);
    return c;
  }

  BackendKind kind() const override { return BackendKind::tiny_transformer; }
  std::size_t layer_count() const override { return shape_.layers; }
  std::size_t hidden_dim() const override { return shape_.dim; }
  const TransformerShape& shape() const { return shape_; }

  /// Per-layer key/value rows for a token prefix.
  struct KvCache {
    std::vector<TokenId> tokens;
    std::vector<std::vector<double>> keys, values;  // [layer][position * dim]
  };

  struct PassResult {
    HiddenStack hidden;
    /// LN_f(x_L[p]) for p in [logits_from, T), in order.
    std::vector<std::vector<double>> final_rows;
  };

  /// Evaluates `tokens`, reusing the first `reuse` positions of `cache` (which must hold
  /// exactly those tokens) and leaving `cache` describing `tokens` on return. Requires
  /// reuse < tokens.size() and, when final rows are requested, reuse <= logits_from.
  PassResult run(KvCache& cache, std::span<const TokenId> tokens, std::size_t reuse,
                 std::size_t logits_from = std::numeric_limits<std::size_t>::max()) const {
    check_tokens(tokens);
    const std::size_t total = tokens.size();
    if (total > shape_.context)
      throw runtime_error(name() + ": sequence of " + std::to_string(total) + " tokens exceeds context " +
                          std::to_string(shape_.context));
    if (reuse >= total) throw std::logic_error("TinyTransformer::run: nothing to compute");
    const bool want_rows = logits_from < total;
    if (want_rows && reuse > logits_from) throw std::logic_error("TinyTransformer::run: rows already cached");

    const std::size_t d = shape_.dim, m = shape_.mlp_dim(), heads = shape_.heads, dh = d / heads;
    const std::size_t rows = total - reuse;
    cache.tokens.assign(tokens.begin(), tokens.end());
    cache.keys.resize(shape_.layers);
    cache.values.resize(shape_.layers);

    std::vector<double> x(rows * d);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t t = reuse + r;
      const double* te = &tok_emb_[tokens[t] * d];
      const double* pe = &pos_emb_[t * d];
      for (std::size_t i = 0; i < d; ++i) x[r * d + i] = te[i] + pe[i];
    }

    PassResult result;
    result.hidden.layers.resize(shape_.layers);
    result.hidden.source_prompt_hash = hash_tokens(tokens);

    std::vector<double> a(rows * d), q(d), ctx(d), o(d), h(m), scores(total);
    for (std::size_t l = 0; l < shape_.layers; ++l) {
      const Block& b = blocks_[l];
      const bool last_layer = (l + 1 == shape_.layers);
      auto& keys = cache.keys[l];
      auto& values = cache.values[l];
      keys.resize(total * d);
      values.resize(total * d);
      for (std::size_t r = 0; r < rows; ++r) {
        layer_norm(&x[r * d], b.ln1_w, b.ln1_b, &a[r * d]);
        affine(&a[r * d], b.wk, b.bk, d, d, &keys[(reuse + r) * d]);
        affine(&a[r * d], b.wv, b.bv, d, d, &values[(reuse + r) * d]);
      }
      const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t t = reuse + r;
        // In the final block only rows that feed an output are needed.
        if (last_layer && t + 1 != total && !(want_rows && t >= logits_from)) continue;
        affine(&a[r * d], b.wq, b.bq, d, d, q.data());
        for (std::size_t hd = 0; hd < heads; ++hd) {
          const std::size_t off = hd * dh;
          double max = -std::numeric_limits<double>::infinity();
          for (std::size_t s = 0; s <= t; ++s) {
            double dot = 0.0;
            for (std::size_t i = 0; i < dh; ++i) dot += q[off + i] * keys[s * d + off + i];
            scores[s] = dot * scale;
            max = std::max(max, scores[s]);
          }
          double sum = 0.0;
          for (std::size_t s = 0; s <= t; ++s) {
            scores[s] = std::exp(scores[s] - max);
            sum += scores[s];
          }
          for (std::size_t i = 0; i < dh; ++i) ctx[off + i] = 0.0;
          for (std::size_t s = 0; s <= t; ++s) {
            const double w = scores[s] / sum;
            for (std::size_t i = 0; i < dh; ++i) ctx[off + i] += w * values[s * d + off + i];
          }
        }
        affine(ctx.data(), b.wo, b.bo, d, d, o.data());
        double* xr = &x[r * d];
        for (std::size_t i = 0; i < d; ++i) xr[i] += o[i];
        layer_norm(xr, b.ln2_w, b.ln2_b, q.data());
        affine(q.data(), b.w1, b.b1, d, m, h.data());
        for (auto& v : h) v = gelu(v);
        affine(h.data(), b.w2, b.b2, m, d, o.data());
        for (std::size_t i = 0; i < d; ++i) xr[i] += o[i];
      }
      const double* last = &x[(rows - 1) * d];
      result.hidden.layers[l].assign(last, last + d);
    }

    if (want_rows) {
      for (std::size_t t = logits_from; t < total; ++t) {
        std::vector<double> row(d);
        layer_norm(&x[(t - reuse) * d], lnf_w_, lnf_b_, row.data());
        result.final_rows.push_back(std::move(row));
      }
    }
    return result;
  }

  HiddenStack forward_hidden(std::span<const TokenId> tokens) const override {
    KvCache cache;
    return run(cache, tokens, 0).hidden;
  }

  LogProbRow next_token_logprobs(std::span<const TokenId> tokens) const override {
    KvCache cache;
    auto pass = run(cache, tokens, 0, tokens.size() - (tokens.empty() ? 0 : 1));
    return logprobs_from_row(pass.final_rows.back());
  }

  std::vector<double> continuation_logprobs(std::span<const TokenId> prefix,
                                            std::span<const TokenId> continuation) const override {
    KvCache cache;
    return continuation_with(cache, prefix, continuation, 0);
  }

  std::unique_ptr<EvalSession> open_session() const override;

  /// Final-norm residual row -> next-token log-probabilities via the tied embedding.
  LogProbRow logprobs_from_row(std::span<const double> row) const {
    const std::size_t d = shape_.dim;
    std::vector<double> logits(shape_.vocab);
    for (std::size_t v = 0; v < shape_.vocab; ++v) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) s += row[i] * tok_emb_[v * d + i];
      logits[v] = s;
    }
    return log_softmax(logits);
  }

  std::vector<double> continuation_with(KvCache& cache, std::span<const TokenId> prefix,
                                        std::span<const TokenId> continuation, std::size_t reuse) const {
    if (prefix.empty()) throw runtime_error(name() + ": empty prefix");
    if (continuation.empty()) return {};
    std::vector<TokenId> seq(prefix.begin(), prefix.end());
    seq.insert(seq.end(), continuation.begin(), continuation.end());
    const std::size_t from = prefix.size() - 1;
    auto pass = run(cache, seq, std::min(reuse, from), from);
    std::vector<double> out;
    out.reserve(continuation.size());
    for (std::size_t i = 0; i < continuation.size(); ++i)
      out.push_back(logprobs_from_row(pass.final_rows[i])[continuation[i]]);
    return out;
  }

  /// Weights back in container form; exact because they were loaded from float32.
  TensorContainer to_container() const {
    TensorContainer c;
    const std::size_t d = shape_.dim, m = shape_.mlp_dim();
    auto put = [&](const std::string& name, const std::vector<double>& v, std::vector<std::size_t> dims) {
      Tensor t;
      t.shape = std::move(dims);
      t.data.assign(v.begin(), v.end());
      c.put(name, std::move(t));
    };
    put("tok_emb", tok_emb_, {shape_.vocab, d});
    put("pos_emb", pos_emb_, {shape_.context, d});
    for (std::size_t l = 0; l < shape_.layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      const Block& b = blocks_[l];
      put(p + "ln1.weight", b.ln1_w, {d});
      put(p + "ln1.bias", b.ln1_b, {d});
      put(p + "attn.wq", b.wq, {d, d});
      put(p + "attn.bq", b.bq, {d});
      put(p + "attn.wk", b.wk, {d, d});
      put(p + "attn.bk", b.bk, {d});
      put(p + "attn.wv", b.wv, {d, d});
      put(p + "attn.bv", b.bv, {d});
      put(p + "attn.wo", b.wo, {d, d});
      put(p + "attn.bo", b.bo, {d});
      put(p + "ln2.weight", b.ln2_w, {d});
      put(p + "ln2.bias", b.ln2_b, {d});
      put(p + "mlp.w1", b.w1, {d, m});
      put(p + "mlp.b1", b.b1, {m});
      put(p + "mlp.w2", b.w2, {m, d});
      put(p + "mlp.b2", b.b2, {d});
    }
    put("ln_f.weight", lnf_w_, {d});
    put("ln_f.bias", lnf_b_, {d});
    return c;
  }

 private:
  struct Block {
    std::vector<double> ln1_w, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_w, ln2_b, w1, b1, w2, b2;
  };

  static std::vector<double> load(const TensorContainer& c, const std::string& name,
                                  const std::vector<std::size_t>& shape) {
    const Tensor& t = c.expect(name, shape);
    return {t.data.begin(), t.data.end()};
  }

  void layer_norm(const double* in, const std::vector<double>& w, const std::vector<double>& b,
                  double* out) const {
    const std::size_t d = shape_.dim;
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += in[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t i = 0; i < d; ++i) out[i] = (in[i] - mean) * inv * w[i] + b[i];
  }

  // out = in W + bias, W stored [in_dim][out_dim].
  static void affine(const double* in, const std::vector<double>& w, const std::vector<double>& bias,
                     std::size_t in_dim, std::size_t out_dim, double* out) {
    for (std::size_t j = 0; j < out_dim; ++j) out[j] = bias[j];
    for (std::size_t i = 0; i < in_dim; ++i) {
      const double xi = in[i];
      const double* row = &w[i * out_dim];
      for (std::size_t j = 0; j < out_dim; ++j) out[j] += xi * row[j];
    }
  }

  static double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))); }

  TransformerShape shape_;
  std::vector<double> tok_emb_, pos_emb_, lnf_w_, lnf_b_;
  std::vector<Block> blocks_;
};

namespace detail {

inline std::size_t common_prefix(std::span<const TokenId> a, std::span<const TokenId> b) {
  const std::size_t n = std::min(a.size(), b.size());
  std::size_t i = 0;
  while (i < n && a[i] == b[i]) ++i;
  return i;
}

/// Keeps the key/value rows of the previous call and recomputes only positions past
/// the longest common prefix. Arithmetic per position is unchanged, so results are
/// bit-identical to a fresh pass.
class TransformerSession final : public EvalSession {
 public:
  explicit TransformerSession(const TinyTransformer& model) : model_(model) {}

  HiddenStack hidden(std::span<const TokenId> tokens) override {
    ++evaluations_;
    const std::size_t reuse = tokens.empty() ? 0 : std::min(common_prefix(cache_.tokens, tokens), tokens.size() - 1);
    return model_.run(cache_, tokens, reuse).hidden;
  }

  std::vector<double> continuation_logprobs(std::span<const TokenId> prefix,
                                            std::span<const TokenId> continuation) override {
    ++evaluations_;
    std::vector<TokenId> seq(prefix.begin(), prefix.end());
    seq.insert(seq.end(), continuation.begin(), continuation.end());
    return model_.continuation_with(cache_, prefix, continuation, common_prefix(cache_.tokens, seq));
  }

 private:
  const TinyTransformer& model_;
  TinyTransformer::KvCache cache_;
};

}  // namespace detail

inline std::unique_ptr<EvalSession> TinyTransformer::open_session() const {
  return std::make_unique<detail::TransformerSession>(*this);
}

}  // namespace poisonlab
