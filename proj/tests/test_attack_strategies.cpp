#include <map>
#include <set>

#include <gtest/gtest.h>

#include "greedy_oracle.hpp"
#include "poisonlab/attacks.hpp"
#include "poisonlab/experiment.hpp"
#include "poisonlab/fixtures.hpp"
#include "test_util.hpp"

using namespace poisonlab;
using test_support::ConstantBackend;

namespace {

const PromptTemplate& f1() {
  static const PromptTemplate t = PromptTemplate::default_template();
  return t;
}

AttackConfig config(Strategy s, std::size_t k, std::uint64_t seed = 0) {
  AttackConfig c;
  c.strategy = s;
  c.budget = k;
  c.synonym_m = 5;
  c.seed = seed;
  return c;
}

EmbeddingTable small_table() {
  return EmbeddingTable::parse(
      "great 1 0 0\nsuperb 0.9 0.1 0\nfine 0.8 0.2 0\nstone 0 0 1\n"
      "film 0 1 0\nmovie 0 0.9 0.1\npicture 0 0.8 0.2\n");
}

std::unique_ptr<TinyTransformer> five_token_model() {
  const Vocabulary v({"<bos>", "<unk>", "a", "b", "c", "d", "e"});
  const TransformerShape shape{v.size(), 8, 2, 1, 64};
  return std::make_unique<TinyTransformer>("five", v, shape, TinyTransformer::random_weights(shape, 3));
}

std::size_t word_diffs(const std::string& a, const std::string& b) {
  const auto x = split_words(a), y = split_words(b);
  if (x.size() != y.size()) return 1000;
  std::size_t n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) n += x.words[i] != y.words[i];
  return n;
}

}  // namespace

TEST(AttackConfig, DefaultsAndValidation) {
  const AttackConfig c;
  EXPECT_EQ(c.budget, 5u);
  EXPECT_EQ(c.synonym_m, 10u);
  EXPECT_FALSE(c.allow_noop_candidate);
  AttackConfig zero = c;
  zero.budget = 0;
  zero.strategy = Strategy::suffix;
  EXPECT_THROW(zero.validate(), Error);
  AttackConfig no_m = c;
  no_m.synonym_m = 0;
  EXPECT_THROW(no_m.validate(), Error);
  EXPECT_EQ(parse_strategy("random-label"), Strategy::random_label);
  EXPECT_EQ(to_string(Strategy::character), "character");
  EXPECT_THROW(parse_strategy("hotflip"), Error);
}

// ---- synonym ----

TEST(SynonymAttack, CommitsArgmaxOfTwoCandidates) {
  const auto tiny = fixtures::tiny_rand_a();
  const auto table = small_table();
  const LabeledText ex{"great acting", "positive"};
  auto cfg = config(Strategy::synonym, 1);
  cfg.synonym_m = 2;
  const auto p = synonym_attack(*tiny, ex, cfg, table, "dull.", f1());
  const double superb = objective(*tiny, ex, "superb acting", "dull.", f1());
  const double fine = objective(*tiny, ex, "fine acting", "dull.", f1());
  ASSERT_NE(superb, fine);
  const bool pick_superb = superb > fine;
  ASSERT_EQ(p.edits.size(), 1u);
  EXPECT_EQ(p.edits[0].before, "great");
  EXPECT_EQ(p.edits[0].after, pick_superb ? "superb" : "fine");
  EXPECT_EQ(p.objective_trace, std::vector<double>{std::max(superb, fine)});
  EXPECT_EQ(p.label, ex.label);
}

TEST(SynonymAttack, ConstantBackendFallsToLowestIndices) {
  const ConstantBackend c(Vocabulary::character_level());
  auto cfg = config(Strategy::synonym, 2);
  cfg.synonym_m = 2;
  const auto p = synonym_attack(c, {"great film, great movie", "positive"}, cfg, small_table(), "q", f1());
  ASSERT_EQ(p.edits.size(), 2u);
  EXPECT_EQ(p.edits[0].position, 0u);
  EXPECT_EQ(p.edits[1].position, 1u);
  // All candidates tie at 0, so the lexicographically first synonym wins.
  EXPECT_EQ(p.edits[0].after, "fine");
  EXPECT_EQ(p.edits[1].after, "movie");
  for (double v : p.objective_trace) EXPECT_EQ(v, 0.0);
  for (double v : p.importance) EXPECT_EQ(v, 0.0);
}

TEST(SynonymAttack, BudgetClampsToWordCount) {
  const auto tiny = fixtures::tiny_rand_a();
  const auto p =
      synonym_attack(*tiny, {"great film great", "positive"}, config(Strategy::synonym, 5), small_table(), "q", f1());
  EXPECT_EQ(p.edits.size(), 3u);
  EXPECT_EQ(p.objective_trace.size(), 3u);
  EXPECT_LE(word_diffs("great film great", p.text), 3u);
}

TEST(SynonymAttack, AbsentWordsAreSkipped) {
  const auto tiny = fixtures::tiny_rand_a();
  const auto p = synonym_attack(*tiny, {"an odd great old film", "positive"}, config(Strategy::synonym, 5),
                                small_table(), "q", f1());
  ASSERT_EQ(p.edits.size(), 2u);
  for (const auto& e : p.edits) EXPECT_TRUE(e.position == 2 || e.position == 4);
  EXPECT_THROW(synonym_attack(*tiny, {"nothing known here", "positive"}, config(Strategy::synonym, 5), small_table(),
                              "q", f1()),
               Error);
}

TEST(SynonymAttack, GreedyReplayOnFixture) {
  const auto tiny = fixtures::tiny_rand_a();
  const auto table = fixtures::embeddings(fixtures::Seeds{}.embeddings());
  const auto pool = fixtures::train_pool();
  for (std::size_t i = 0; i < 2; ++i) {
    const auto p = synonym_attack(*tiny, pool[i], config(Strategy::synonym, 3), table, pool[5].text, f1());
    const auto r = test_support::replay_synonym(*tiny, pool[i], p, table, 5, 3, pool[5].text, f1());
    EXPECT_TRUE(r.ok) << r.detail;
    EXPECT_EQ(r.steps, 3u);
  }
}

// ---- character ----

TEST(CharacterAttack, FourCharacterAlphabetBruteForce) {
  const auto tiny = fixtures::tiny_rand_a();
  const CharacterSet abcd("abcd");
  const LabeledText ex{"bad cab", "negative"};
  const auto p = character_attack(*tiny, ex, config(Strategy::character, 1), abcd, "dab", f1());
  const auto r = test_support::replay_character(*tiny, ex, p, abcd, 1, "dab", f1());
  EXPECT_TRUE(r.ok) << r.detail;
  EXPECT_EQ(r.evaluations, 3u);
  ASSERT_EQ(p.edits.size(), 1u);
  EXPECT_NE(p.edits[0].after, p.edits[0].before);
}

TEST(CharacterAttack, LengthOneText) {
  const auto tiny = fixtures::tiny_rand_a();
  const auto p = character_attack(*tiny, {"x", "positive"}, config(Strategy::character, 1),
                                   CharacterSet::printable_ascii(), "q", f1());
  ASSERT_EQ(p.edits.size(), 1u);
  EXPECT_EQ(p.importance.size(), 1u);
  EXPECT_EQ(p.text.size(), 1u);
  EXPECT_NE(p.text, "x");
}

TEST(CharacterAttack, NoopCandidateGivesNonDecreasingTrace) {
  const auto tiny = fixtures::tiny_rand_a();
  auto cfg = config(Strategy::character, 4);
  cfg.allow_noop_candidate = true;
  const auto p = character_attack(*tiny, {"fun film", "positive"}, cfg, CharacterSet("abcdefgh "), "q", f1());
  ASSERT_EQ(p.objective_trace.size(), 4u);
  EXPECT_GE(p.objective_trace[0], 0.0);
  for (std::size_t i = 1; i < p.objective_trace.size(); ++i)
    EXPECT_GE(p.objective_trace[i], p.objective_trace[i - 1]);
}

TEST(CharacterAttack, ByteBudgetAndLabel) {
  const auto tiny = fixtures::tiny_rand_a();
  const LabeledText ex{"warm, witty film.", "positive"};
  const auto p = character_attack(*tiny, ex, config(Strategy::character, 3), CharacterSet::printable_ascii(), "q", f1());
  ASSERT_EQ(p.text.size(), ex.text.size());
  std::size_t diffs = 0;
  for (std::size_t i = 0; i < ex.text.size(); ++i) diffs += p.text[i] != ex.text[i];
  EXPECT_EQ(diffs, 3u);
  EXPECT_EQ(p.label, ex.label);
}

// ---- suffix ----

TEST(SuffixAttack, PerPositionBruteForceOnFiveTokens) {
  const auto m = five_token_model();
  const LabeledText ex{"abc", "d"};
  const auto p = suffix_attack(*m, ex, config(Strategy::suffix, 2, 41), m->vocabulary(), "cab", f1());
  const auto r = test_support::replay_suffix(*m, ex, p, 2, "cab", f1());
  EXPECT_TRUE(r.ok) << r.detail;
  EXPECT_EQ(r.evaluations, 10u);
  EXPECT_EQ(p.suffix_tokens.size(), 2u);
  EXPECT_EQ(p.text.substr(0, 3), "abc");
}

TEST(SuffixAttack, DeterministicForEqualSeeds) {
  const auto tiny = fixtures::tiny_rand_a();
  const LabeledText ex{"bland plot.", "negative"};
  const auto a = suffix_attack(*tiny, ex, config(Strategy::suffix, 2, 8), tiny->vocabulary(), "q", f1());
  const auto b = suffix_attack(*tiny, ex, config(Strategy::suffix, 2, 8), tiny->vocabulary(), "q", f1());
  EXPECT_EQ(a.suffix_tokens, b.suffix_tokens);
  EXPECT_EQ(a.objective_trace, b.objective_trace);
  EXPECT_EQ(poisoned_record(a).dump(), poisoned_record(b).dump());
  EXPECT_EQ(a.text, ex.text + a.suffix_tokens[0] + a.suffix_tokens[1]);
  EXPECT_THROW(suffix_attack(*tiny, ex, config(Strategy::suffix, 0), tiny->vocabulary(), "q", f1()), Error);
}

TEST(SuffixAttack, CandidatesExcludeSpecialsAndFrameTokens) {
  const auto v = Vocabulary::character_level();
  for (TokenId id : v.text_domain_tokens()) {
    EXPECT_FALSE(v.is_special(id));
    EXPECT_NE(v.token(id), "\n");
    EXPECT_NE(v.token(id), std::string(Vocabulary::kArrow));
  }
}

// ---- random label ----

TEST(RandomLabel, DeterministicAndTextUnchanged) {
  const std::vector<std::string> labels{"negative", "positive"};
  const LabeledText ex{"some text", "positive"};
  const auto a = random_label_flip(ex, labels, 77);
  EXPECT_EQ(a.label, random_label_flip(ex, labels, 77).label);
  EXPECT_EQ(a.text, ex.text);
  EXPECT_THROW(random_label_flip(ex, {"only"}, 1), Error);
}

TEST(RandomLabel, UniformOverFullSpace) {
  const std::vector<std::string> labels{"a", "b", "c", "d"};
  std::map<std::string, int> counts;
  for (std::uint64_t i = 0; i < 10000; ++i) ++counts[random_label_flip({"t", "a"}, labels, derive_seed(5, i)).label];
  for (const auto& l : labels) EXPECT_NEAR(counts[l] / 10000.0, 0.25, 0.02) << l;
}

// ---- dataset driver ----

TEST(PoisonDataset, EmptyDatasetRejected) {
  const auto tiny = fixtures::tiny_rand_a();
  EXPECT_THROW(poison_dataset(tiny.get(), {}, config(Strategy::character, 1), {}, f1()), Error);
}

TEST(PoisonDataset, DummyQueryIsAnotherExample) {
  for (std::uint64_t seed : {0, 1, 2, 3}) {
    std::set<std::size_t> dummies;
    for (std::size_t i = 0; i < 10; ++i) {
      const auto d = dummy_index(10, i, seed);
      EXPECT_NE(d, i);
      EXPECT_LT(d, 10u);
      dummies.insert(d);
    }
    EXPECT_EQ(dummies.size(), 2u);
  }
}

TEST(PoisonDataset, OrderLabelsAndDeterminism) {
  const auto tiny = fixtures::tiny_rand_a();
  auto pool = fixtures::train_pool();
  pool.resize(10);
  for (auto& r : pool) r.text = r.text.substr(0, 12);
  AttackResources res;
  res.label_space = fixtures::labels();
  const auto cfg = config(Strategy::suffix, 1, 3);
  const auto a = poison_dataset(tiny.get(), pool, cfg, res, f1(), 1);
  const auto b = poison_dataset(tiny.get(), pool, cfg, res, f1(), 3);
  ASSERT_EQ(a.examples.size(), 10u);
  EXPECT_EQ(a.time_ms.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(a.examples[i].original, pool[i]);
    EXPECT_EQ(a.examples[i].label, pool[i].label);
    EXPECT_EQ(a.examples[i].text.substr(0, pool[i].text.size()), pool[i].text);
  }
  EXPECT_EQ(poisoned_lines(a), poisoned_lines(b));
}

TEST(PoisonDataset, FailuresPassThroughFlagged) {
  const auto tiny = fixtures::tiny_rand_a();
  const auto table = small_table();
  AttackResources res;
  res.embeddings = &table;
  const std::vector<LabeledText> pool{{"great film", "positive"}, {"unknown words only", "negative"}};
  const auto run = poison_dataset(tiny.get(), pool, config(Strategy::synonym, 1), res, f1());
  EXPECT_TRUE(run.examples[0].failure.empty());
  EXPECT_NE(run.examples[1].failure.find("no replaceable words"), std::string::npos);
  EXPECT_EQ(run.examples[1].poisoned(), pool[1]);
  EXPECT_TRUE(poisoned_record(run.examples[1]).contains("failure"));
  AttackResources none;
  EXPECT_THROW(poison_dataset(tiny.get(), pool, config(Strategy::synonym, 1), none, f1()), Error);
}

TEST(PoisonDataset, RecordSchema) {
  const auto tiny = fixtures::tiny_rand_a();
  const auto p = character_attack(*tiny, {"ok", "positive"}, config(Strategy::character, 1),
                                   CharacterSet::printable_ascii(), "q", f1());
  const auto j = poisoned_record(p);
  for (const char* key : {"text", "label", "edits", "objective_trace", "evaluations"}) EXPECT_TRUE(j.contains(key)) << key;
  const auto e = j.at("edits").at(0);
  EXPECT_EQ(e.at("kind"), "char");
  EXPECT_TRUE(e.contains("position") && e.contains("before") && e.contains("after"));
}
