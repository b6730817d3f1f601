#pragma once

// Bundled desk-scale fixtures: a synthetic two-class sentiment task, a word-embedding
// table clustered by meaning, and the five fixture backends. Everything is a pure
// function of the seed.

#include <array>
#include <cctype>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "poisonlab/char_ngram.hpp"
#include "poisonlab/common.hpp"
#include "poisonlab/dataset.hpp"
#include "poisonlab/embeddings.hpp"
#include "poisonlab/mock_icl.hpp"
#include "poisonlab/model_io.hpp"
#include "poisonlab/tiny_transformer.hpp"

namespace poisonlab::fixtures {

// Each group shares one meaning. Sentences only ever use the first form of a group; the
// other five exist only in the embedding table, so synonym swaps move text off the corpus.
using Group = std::array<const char*, 6>;

inline const std::vector<Group>& positive_groups() {
  static const std::vector<Group> g{
      {"great", "good", "fine", "solid", "decent", "nice"},
      {"wonderful", "lovely", "delightful", "charming", "pleasant", "sweet"},
      {"brilliant", "superb", "excellent", "outstanding", "stellar", "splendid"},
      {"moving", "touching", "heartfelt", "tender", "poignant", "stirring"},
      {"funny", "witty", "hilarious", "clever", "amusing", "droll"},
      {"beautiful", "gorgeous", "stunning", "elegant", "graceful", "radiant"},
  };
  return g;
}

inline const std::vector<Group>& negative_groups() {
  static const std::vector<Group> g{
      {"bad", "poor", "weak", "lame", "shoddy", "inferior"},
      {"boring", "dull", "tedious", "bland", "flat", "tiresome"},
      {"awful", "terrible", "dreadful", "horrid", "atrocious", "abysmal"},
      {"messy", "sloppy", "clumsy", "chaotic", "muddled", "jumbled"},
      {"stupid", "silly", "dumb", "inane", "vapid", "mindless"},
      {"ugly", "grim", "drab", "dreary", "murky", "bleak"},
  };
  return g;
}

inline const std::vector<Group>& noun_groups() {
  static const std::vector<Group> g{
      {"movie", "film", "picture", "feature", "flick", "production"},
      {"plot", "story", "narrative", "storyline", "tale", "premise"},
      {"acting", "cast", "performances", "ensemble", "actors", "players"},
      {"ending", "finale", "climax", "conclusion", "resolution", "denouement"},
      {"music", "score", "soundtrack", "songs", "melody", "tunes"},
      {"script", "dialogue", "writing", "screenplay", "lines", "wording"},
  };
  return g;
}

inline const std::vector<Group>& adverb_groups() {
  static const std::vector<Group> g{
      {"really", "very", "truly", "quite", "rather", "pretty"},
      {"so", "too", "fairly", "somewhat", "awfully", "terribly"},
  };
  return g;
}

inline const std::vector<std::string>& labels() {
  static const std::vector<std::string> l{"negative", "positive"};
  return l;
}

inline std::string pick(Rng& rng, const std::vector<Group>& groups) {
  return groups[uniform_index(rng, groups.size())][0];
}

/// One sentence of the synthetic task with the given label (0 negative, 1 positive).
inline std::string sentence(Rng& rng, std::size_t label) {
  const auto& adj = label == 1 ? positive_groups() : negative_groups();
  const std::string a1 = pick(rng, adj), a2 = pick(rng, adj), a3 = pick(rng, adj);
  const std::string noun = pick(rng, noun_groups()), adv = pick(rng, adverb_groups());
  switch (uniform_index(rng, 3)) {
    case 0: return a1 + ", " + a2 + " and " + a3 + " " + noun + ".";
    case 1: return "the " + noun + " was " + a1 + " and " + a2 + ", " + adv + " " + a3 + ".";
    default: return adv + " " + a1 + " " + noun + ", " + a2 + " and " + a3 + ".";
  }
}

/// `n` records with a uniformly drawn label each. `capitalize` upper-cases the first letter.
inline std::vector<LabeledText> sentiment_records(std::size_t n, std::uint64_t seed, bool capitalize = false) {
  Rng rng(seed);
  std::vector<LabeledText> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = uniform_index(rng, 2);
    std::string text = sentence(rng, label);
    if (capitalize) text[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(text[0])));
    out.push_back({std::move(text), labels()[label]});
  }
  return out;
}

/// Every group word gets its group centre plus small noise; centres are independent
/// Gaussian draws, so words of different groups are close to orthogonal.
inline EmbeddingTable embeddings(std::uint64_t seed, std::size_t dim = 16) {
  Rng rng(seed);
  EmbeddingTable table;
  for (const auto* family : {&positive_groups(), &negative_groups(), &noun_groups(), &adverb_groups()}) {
    for (const auto& group : *family) {
      std::vector<double> centre(dim);
      for (auto& c : centre) c = standard_normal(rng);
      for (const char* word : group) {
        std::vector<double> v(dim);
        for (std::size_t i = 0; i < dim; ++i) v[i] = centre[i] + 0.3 * standard_normal(rng);
        table.add(word, std::move(v));
      }
    }
  }
  return table;
}

inline Vocabulary vocabulary() { return Vocabulary::character_level(CharacterSet::printable_ascii()); }

struct Seeds {
  std::uint64_t base = 0;
  std::uint64_t train() const { return derive_seed(base, 1); }
  std::uint64_t test() const { return derive_seed(base, 2); }
  std::uint64_t scorer_corpus() const { return derive_seed(base, 3); }
  std::uint64_t sst2_style() const { return derive_seed(base, 4); }
  std::uint64_t embeddings() const { return derive_seed(base, 5); }
};

inline constexpr std::size_t kPoolSize = 100;
inline constexpr std::size_t kTestSize = 100;
inline constexpr std::size_t kScorerCorpusSize = 400;

inline ModelManifest mock_icl_manifest() {
  ModelManifest m;
  m.kind = BackendKind::mock_icl;
  m.name = "mock-icl";
  m.layers = 3;
  m.dim = 256;
  m.seed = 7;
  m.template_spec = "F1";
  return m;
}

inline ModelManifest tiny_manifest(const std::string& name, std::uint64_t seed) {
  ModelManifest m;
  m.kind = BackendKind::tiny_transformer;
  m.name = name;
  m.layers = 2;
  m.dim = 32;
  m.heads = 4;
  m.context = 1024;
  m.seed = seed;
  m.weights_path = "weights.bin";
  return m;
}

inline ModelManifest ngram_manifest(const std::string& name, std::size_t order, bool with_corpus) {
  ModelManifest m;
  m.kind = BackendKind::char_ngram;
  m.name = name;
  m.layers = 1;
  m.dim = vocabulary().size();
  m.order = order;
  if (with_corpus) m.corpus_path = "corpus.txt";
  return m;
}

inline std::unique_ptr<MockIclModel> mock_icl() {
  const auto m = mock_icl_manifest();
  return std::make_unique<MockIclModel>(m.name, vocabulary(), m.layers, m.dim, m.seed,
                                        PromptTemplate::resolve(m.template_spec));
}

inline std::unique_ptr<TinyTransformer> tiny(const std::string& name, std::uint64_t seed) {
  const auto m = tiny_manifest(name, seed);
  const Vocabulary vocab = vocabulary();
  const TransformerShape shape{vocab.size(), m.dim, m.heads, m.layers, m.context};
  return std::make_unique<TinyTransformer>(name, vocab, shape, TinyTransformer::random_weights(shape, seed));
}

inline std::unique_ptr<TinyTransformer> tiny_rand_a() { return tiny("tiny-rand-a", 1); }
inline std::unique_ptr<TinyTransformer> tiny_rand_b() { return tiny("tiny-rand-b", 2); }

inline std::vector<std::string> scorer_corpus(const Seeds& seeds = {}) {
  std::vector<std::string> lines;
  for (auto& r : sentiment_records(kScorerCorpusSize, seeds.scorer_corpus())) lines.push_back(std::move(r.text));
  return lines;
}

inline std::unique_ptr<CharNgramModel> bigram(const Seeds& seeds = {}) {
  return std::make_unique<CharNgramModel>("bigram", vocabulary(), 2, scorer_corpus(seeds));
}

inline std::unique_ptr<CharNgramModel> uniform() {
  return std::make_unique<CharNgramModel>("uniform", vocabulary(), 1, std::vector<std::string>{});
}

inline std::vector<LabeledText> train_pool(const Seeds& seeds = {}) { return sentiment_records(kPoolSize, seeds.train()); }
inline std::vector<LabeledText> test_set(const Seeds& seeds = {}) { return sentiment_records(kTestSize, seeds.test()); }

/// Default experiment configuration over the written fixture tree (paths relative to it):
/// the mock-icl task under every strategy, budget sweep and poisoning rate.
inline nlohmann::json default_config(std::uint64_t seed) {
  return {
      {"datasets", {{{"name", "synthetic-sentiment"}, {"train", "data/train.jsonl"}, {"test", "data/test.jsonl"}}}},
      {"surrogate", "models/mock-icl"},
      {"targets", {"models/mock-icl"}},
      {"embeddings", "embeddings.txt"},
      {"strategies", {"random-label", "synonym", "character", "suffix"}},
      {"budgets", {1, 2, 3, 4, 5}},
      {"synonym_m", 5},
      {"rates", {0.0, 0.1, 0.2, 0.5, 1.0}},
      {"templates", {"F1"}},
      {"shots", {5}},
      {"runs", 5},
      {"defense", {{"scorer", "models/bigram"}, {"quantile", 0.95}}},
      {"seed", seed},
      {"out", "out"},
  };
}

/// Surrogate tiny-rand-a, evaluated on itself, on tiny-rand-b and on mock-icl.
inline nlohmann::json transfer_config(std::uint64_t seed) {
  return {
      {"datasets", {{{"name", "synthetic-sentiment"}, {"train", "data/train.jsonl"}, {"test", "data/test.jsonl"}}}},
      {"surrogate", "models/tiny-rand-a"},
      {"targets", {"models/tiny-rand-a", "models/tiny-rand-b", "models/mock-icl"}},
      {"embeddings", "embeddings.txt"},
      {"strategies", {"synonym"}},
      {"budgets", {5}},
      {"synonym_m", 5},
      {"rates", {1.0}},
      {"templates", {"F1"}},
      {"shots", {5}},
      {"runs", 5},
      {"seed", seed},
      {"out", "out-transfer"},
  };
}

/// Writes vocabulary, models, datasets, embeddings and both experiment configs under `dir`.
inline void write_all(const std::filesystem::path& dir, std::uint64_t seed = 0) {
  const Seeds seeds{seed};
  const Vocabulary vocab = vocabulary();
  vocab.save(dir / "vocab.txt");

  write_file(dir / "data/train.jsonl", emit_dataset(train_pool(seeds)));
  write_file(dir / "data/test.jsonl", emit_dataset(test_set(seeds)));
  write_file(dir / "data/sst2_style.jsonl", emit_dataset(sentiment_records(200, seeds.sst2_style(), true)));
  write_file(dir / "embeddings.txt", embeddings(seeds.embeddings()).serialize());

  {
    const auto m = mock_icl_manifest();
    vocab.save(dir / "models/mock-icl" / m.vocab_path);
    save_manifest(dir / "models/mock-icl", m);
  }
  for (const auto& [name, s] : {std::pair<std::string, std::uint64_t>{"tiny-rand-a", 1}, {"tiny-rand-b", 2}}) {
    save_tiny_transformer(dir / "models" / name, *tiny(name, s), tiny_manifest(name, s));
  }
  {
    const auto m = ngram_manifest("bigram", 2, true);
    vocab.save(dir / "models/bigram" / m.vocab_path);
    std::string corpus;
    for (const auto& line : scorer_corpus(seeds)) corpus += line + "\n";
    write_file(dir / "models/bigram" / m.corpus_path, corpus);
    save_manifest(dir / "models/bigram", m);
  }
  {
    const auto m = ngram_manifest("uniform", 1, false);
    vocab.save(dir / "models/uniform" / m.vocab_path);
    save_manifest(dir / "models/uniform", m);
  }
  write_file(dir / "experiment.json", default_config(seed).dump(2) + "\n");
  write_file(dir / "transfer.json", transfer_config(seed).dump(2) + "\n");
}

}  // namespace poisonlab::fixtures
