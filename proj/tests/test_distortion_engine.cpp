#include <cmath>

#include <gtest/gtest.h>

#include "poisonlab/distortion.hpp"
#include "poisonlab/fixtures.hpp"
#include "poisonlab/prompt_template.hpp"
#include "test_util.hpp"

using namespace poisonlab;

namespace {

std::vector<double> random_vector(Rng& rng, std::size_t d) {
  std::vector<double> v(d);
  for (auto& x : v) x = standard_normal(rng);
  return v;
}

double brute_layer(const std::vector<double>& a, const std::vector<double>& b) {
  double na = 0, nb = 0;
  for (double x : a) na += x * x;
  for (double x : b) nb += x * x;
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ua = na == 0 ? 0 : a[i] / na;
    const double ub = nb == 0 ? 0 : b[i] / nb;
    s += (ua - ub) * (ua - ub);
  }
  return std::sqrt(s);
}

std::vector<double> at_angle(double theta) { return {std::cos(theta), std::sin(theta)}; }

// Probe-prompt distortion recomputed from rendering, tokenization and forward passes.
double pipeline_value(const ModelBackend& m, const LabeledText& ex, const std::string& pert, const std::string& dummy) {
  const std::string clean = ex.text + "\xe2\x86\x92" + ex.label + "\n" + dummy + "\xe2\x86\x92";
  const std::string other = pert + "\xe2\x86\x92" + ex.label + "\n" + dummy + "\xe2\x86\x92";
  const auto h1 = m.forward_hidden(m.tokenize(clean).ids);
  const auto h2 = m.forward_hidden(m.tokenize(other).ids);
  double best = 1e300;
  for (std::size_t l = 0; l < h1.layer_count(); ++l) best = std::min(best, brute_layer(h1.layers[l], h2.layers[l]));
  return best;
}

}  // namespace

// ---- templates and probe prompts ----

TEST(ProbePrompt, DefaultTemplateRendering) {
  const auto v = Vocabulary::character_level();
  const auto p = build_probe_prompt({"great movie", "positive"}, "fine film", PromptTemplate::default_template(), v);
  EXPECT_EQ(p.rendered, "great movie\xe2\x86\x92positive\nfine film\xe2\x86\x92");
  EXPECT_EQ(v.token(p.tokens.back()), "\xe2\x86\x92");
  EXPECT_EQ(p.tokens.front(), v.bos());
}

TEST(PromptTemplate, MissingOrMisorderedPlaceholders) {
  EXPECT_THROW(PromptTemplate::from_pattern("t", "{input}->{output}\n"), Error);
  EXPECT_THROW(PromptTemplate::from_pattern("t", "{output}->{input}\n{query}->"), Error);
  EXPECT_THROW(PromptTemplate::from_pattern("t", "{input}->{output}\n{query}=>"), Error);
  EXPECT_THROW(PromptTemplate::from_pattern("t", "{input}{output}\n{query}"), Error);
  EXPECT_THROW(PromptTemplate::builtin("F9"), Error);
}

TEST(PromptTemplate, RenderParseRoundTrip) {
  const std::vector<LabeledText> shots{{"a fine film", "positive"}, {"dull, slow plot", "negative"}};
  for (const char* spec : {"F1", "F2", "F3", "Q: {input} A: {output} || Q: {query} A: "}) {
    const auto t = PromptTemplate::resolve(spec);
    const std::string rendered = t.render(shots, "what now");
    const auto parsed = t.parse(rendered);
    ASSERT_TRUE(parsed.has_value()) << spec;
    EXPECT_EQ(parsed->shots, shots) << spec;
    EXPECT_EQ(parsed->query, "what now") << spec;
    EXPECT_EQ(t.render(parsed->shots, parsed->query), rendered);
  }
}

TEST(PromptTemplate, F2Frame) {
  const auto t = PromptTemplate::builtin("F2");
  EXPECT_EQ(t.render({{"x", "y"}}, "q"), "Input: x\nLabel: y\n\nInput: q\nLabel: ");
  EXPECT_EQ(t.answer_delimiter(), "\nLabel: ");
  EXPECT_FALSE(t.parse("garbage").has_value());
}

// ---- layer distance ----

TEST(LayerDistance, Examples) {
  const std::vector<double> a{3, -4}, neg{-3, 4}, e1{1, 0}, e2{0, 1};
  EXPECT_EQ(layer_distance(a, a), 0.0);
  EXPECT_DOUBLE_EQ(layer_distance(a, neg), 2.0);
  EXPECT_DOUBLE_EQ(layer_distance(e1, e2), std::sqrt(2.0));
  EXPECT_THROW(layer_distance(a, std::vector<double>{1, 2, 3}), Error);
}

TEST(LayerDistance, ZeroNormRule) {
  const std::vector<double> z{0, 0, 0}, h{0, 5, 0};
  EXPECT_DOUBLE_EQ(layer_distance(z, h), 1.0);
  EXPECT_EQ(layer_distance(z, z), 0.0);
}

TEST(LayerDistance, ScaleInvarianceAndSymmetry) {
  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const auto h1 = random_vector(rng, 16), h2 = random_vector(rng, 16);
    const double a = 10.0 * (1.0 - uniform_unit(rng)), b = 10.0 * (1.0 - uniform_unit(rng));
    auto s1 = h1, s2 = h2;
    for (auto& x : s1) x *= a;
    for (auto& x : s2) x *= b;
    const double d = layer_distance(h1, h2);
    EXPECT_NEAR(layer_distance(s1, s2), d, 1e-9);
    EXPECT_EQ(layer_distance(h2, h1), d);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 2.0);
  }
}

// ---- distortion ----

TEST(Distortion, IdenticalAndMin) {
  const HiddenStack a{{{1, 2}, {3, 4}, {5, 6}}, 0};
  EXPECT_EQ(distortion(a, a).aggregate, 0.0);
  const auto angle = [](double d) { return 2.0 * std::asin(d / 2.0); };
  const HiddenStack x{{at_angle(0), at_angle(0), at_angle(0)}, 0};
  const HiddenStack y{{at_angle(angle(0.5)), at_angle(angle(0.2)), at_angle(angle(0.9))}, 0};
  const auto s = distortion(x, y);
  EXPECT_NEAR(s.per_layer[0], 0.5, 1e-12);
  EXPECT_NEAR(s.per_layer[2], 0.9, 1e-12);
  EXPECT_EQ(s.aggregate, s.per_layer[1]);
  EXPECT_NEAR(s.aggregate, 0.2, 1e-12);
}

TEST(Distortion, ShapeMismatch) {
  const HiddenStack a{{{1, 2}}, 0}, b{{{1, 2}, {3, 4}}, 0}, c{{{1, 2, 3}}, 0};
  EXPECT_THROW(distortion(a, b), Error);
  EXPECT_THROW(distortion(a, c), Error);
  EXPECT_THROW(distortion(HiddenStack{}, HiddenStack{}), Error);
}

TEST(Distortion, BruteForceOracleOnRandomStacks) {
  Rng rng(77);
  for (int i = 0; i < 100; ++i) {
    HiddenStack a, b;
    for (int l = 0; l < 4; ++l) {
      a.layers.push_back(random_vector(rng, 32));
      b.layers.push_back(random_vector(rng, 32));
    }
    double best = 1e300;
    for (int l = 0; l < 4; ++l) best = std::min(best, brute_layer(a.layers[l], b.layers[l]));
    const auto s = distortion(a, b);
    EXPECT_NEAR(s.aggregate, best, 1e-9);
    for (double v : s.per_layer) EXPECT_LE(s.aggregate, v);
  }
}

// ---- objective ----

TEST(Objective, IdentityPerturbationIsZero) {
  const auto mock = fixtures::mock_icl();
  const auto tiny = fixtures::tiny_rand_a();
  const auto bigram = fixtures::bigram();
  const auto tmpl = PromptTemplate::default_template();
  const LabeledText ex{"a moving, tender film.", "positive"};
  for (const ModelBackend* m : std::initializer_list<const ModelBackend*>{mock.get(), tiny.get(), bigram.get()})
    EXPECT_EQ(objective(*m, ex, ex.text, "dull plot.", tmpl), 0.0) << m->name();
}

TEST(Objective, DisjointUnigramsAreOrthogonalOnMock) {
  const auto mock = fixtures::mock_icl();
  const auto h1 = mock->forward_hidden(mock->tokenize("aaa").ids);
  const auto h2 = mock->forward_hidden(mock->tokenize("zzz").ids);
  EXPECT_DOUBLE_EQ(layer_distance(h1.layers[0], h2.layers[0]), std::sqrt(2.0));
}

TEST(Objective, MatchesIndependentPipelineOnTiny) {
  const auto tiny = fixtures::tiny_rand_a();
  const auto tmpl = PromptTemplate::default_template();
  const LabeledText ex{"witty and tender script.", "positive"};
  const std::string dummy = "a dull plot.";
  ProbeObjective obj(*tiny, ex, dummy, tmpl);
  Rng rng(9);
  const auto& cs = CharacterSet::printable_ascii();
  for (int i = 0; i < 20; ++i) {
    const std::string pert = with_char(ex.text, uniform_index(rng, ex.text.size()), cs[uniform_index(rng, cs.size())]);
    const double expect = pipeline_value(*tiny, ex, pert, dummy);
    EXPECT_EQ(objective(*tiny, ex, pert, dummy, tmpl), expect);
    EXPECT_EQ(obj(pert), expect);
  }
}

// ---- importance ----

TEST(Importance, ConstantBackendScoresZero) {
  const test_support::ConstantBackend c(Vocabulary::character_level());
  const auto tmpl = PromptTemplate::default_template();
  const LabeledText ex{"any words at all", "positive"};
  for (double v : importance_scores(c, ex, "q", tmpl, Granularity::word)) EXPECT_EQ(v, 0.0);
  for (double v : importance_scores(c, ex, "q", tmpl, Granularity::character)) EXPECT_EQ(v, 0.0);
}

TEST(Importance, SingleWordDeletesToEmptyInput) {
  const auto tiny = fixtures::tiny_rand_a();
  const auto tmpl = PromptTemplate::default_template();
  const LabeledText ex{"wonderful", "positive"};
  const auto s = importance_scores(*tiny, ex, "bad.", tmpl, Granularity::word);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0], objective(*tiny, ex, "", "bad.", tmpl));
  EXPECT_GT(s[0], 0.0);
}

TEST(Importance, EmptyTextRejected) {
  const auto tiny = fixtures::tiny_rand_a();
  const auto tmpl = PromptTemplate::default_template();
  EXPECT_THROW(importance_scores(*tiny, {"", "positive"}, "q", tmpl, Granularity::character), Error);
  EXPECT_THROW(importance_scores(*tiny, {" ,", "positive"}, "q", tmpl, Granularity::word), Error);
}

TEST(Importance, MatchesExhaustiveDeletionOracle) {
  const auto tiny = fixtures::tiny_rand_a();
  const auto tmpl = PromptTemplate::default_template();
  const LabeledText ex{"so witty, so tender and so heartfelt a script today", "positive"};
  const std::string dummy = "the plot was bland.";
  const auto words = importance_scores(*tiny, ex, dummy, tmpl, Granularity::word);
  const auto seg = split_words(ex.text);
  ASSERT_EQ(words.size(), 10u);
  for (std::size_t i = 0; i < seg.size(); ++i) EXPECT_EQ(words[i], pipeline_value(*tiny, ex, seg.without_word(i), dummy));
  const LabeledText short_ex{"fun, warm.", "positive"};
  const auto chars = importance_scores(*tiny, short_ex, dummy, tmpl, Granularity::character);
  ASSERT_EQ(chars.size(), short_ex.text.size());
  for (std::size_t i = 0; i < chars.size(); ++i) {
    EXPECT_EQ(chars[i], pipeline_value(*tiny, short_ex, without_char(short_ex.text, i), dummy));
    EXPECT_GE(chars[i], 0.0);
  }
}

TEST(TopK, DescendingWithLowerIndexTies) {
  const std::vector<double> s{0.3, 0.9, 0.3, 0.9, 0.1};
  EXPECT_EQ(top_k_indices(s, 3), (std::vector<std::size_t>{1, 3, 0}));
  EXPECT_EQ(top_k_indices(s, 10).size(), 5u);
  const std::vector<std::size_t> eligible{0, 2, 4};
  EXPECT_EQ(top_k_indices(s, 2, eligible), (std::vector<std::size_t>{0, 2}));
}
