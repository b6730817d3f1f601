#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "poisonlab/embeddings.hpp"
#include "poisonlab/fixtures.hpp"
#include "test_util.hpp"

using namespace poisonlab;

namespace {

std::string error_message(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

EmbeddingTable random_table(std::size_t words, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingTable t;
  for (std::size_t i = 0; i < words; ++i) {
    std::vector<double> v(dim);
    for (auto& x : v) x = standard_normal(rng);
    t.add("w" + std::to_string(i), std::move(v));
  }
  return t;
}

}  // namespace

TEST(LoadEmbeddings, TwoLines) {
  const auto t = EmbeddingTable::parse("a 1 0\nb 0 1\n");
  EXPECT_EQ(t.size(), 2u);
  EXPECT_EQ(t.dim(), 2u);
  EXPECT_EQ(t.vector(*t.lookup("b")), (std::vector<double>{0.0, 1.0}));
}

TEST(LoadEmbeddings, RaggedDimensionNamesLine) {
  const auto msg = error_message([] { EmbeddingTable::parse("a 1 0\nb 1 2 3\n"); });
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("dimension"), std::string::npos) << msg;
}

TEST(LoadEmbeddings, NonNumericAndDuplicate) {
  EXPECT_NE(error_message([] { EmbeddingTable::parse("a 1 x\n"); }).find("line 1"), std::string::npos);
  EXPECT_NE(error_message([] { EmbeddingTable::parse("a 1\nb 2\na 3\n"); }).find("line 3"), std::string::npos);
  EXPECT_THROW(EmbeddingTable::parse("lonely\n"), Error);
  EXPECT_THROW(EmbeddingTable::parse("a nan\n"), Error);
}

TEST(LoadEmbeddings, TenThousandLineRoundTrip) {
  test_support::TempDir dir("emb");
  const EmbeddingTable t = random_table(10000, 8, 99);
  write_file(dir / "table.txt", t.serialize());
  const EmbeddingTable back = EmbeddingTable::load(dir / "table.txt");
  ASSERT_EQ(back.size(), t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto j = back.lookup(t.word(i));
    ASSERT_TRUE(j.has_value());
    ASSERT_EQ(back.vector(*j), t.vector(i));
  }
}

TEST(TopMSynonyms, SpecExample) {
  const auto t = EmbeddingTable::parse("a 1 0\nb 1 0\nc 0 1\n");
  EXPECT_EQ(t.top_m_synonyms("a", 2), (std::vector<std::string>{"b", "c"}));
}

TEST(TopMSynonyms, ZeroVectorOrdersLexicographically) {
  const auto t = EmbeddingTable::parse("q 0 0\nzeta 1 0\nalpha 0 1\nmid 3 4\n");
  EXPECT_EQ(t.top_m_synonyms("q", 3), (std::vector<std::string>{"alpha", "mid", "zeta"}));
}

TEST(TopMSynonyms, MatchesBruteForceOracle) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const EmbeddingTable t = random_table(50, 6, seed);
    for (std::size_t q = 0; q < t.size(); ++q) {
      std::vector<std::pair<double, std::string>> all;
      const auto& a = t.vector(q);
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (i == q) continue;
        const auto& b = t.vector(i);
        double dot = 0, na = 0, nb = 0;
        for (std::size_t k = 0; k < a.size(); ++k) {
          dot += a[k] * b[k];
          na += a[k] * a[k];
          nb += b[k] * b[k];
        }
        all.emplace_back(dot / (std::sqrt(na) * std::sqrt(nb)), t.word(i));
      }
      std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
        return x.first != y.first ? x.first > y.first : x.second < y.second;
      });
      std::vector<std::string> expect;
      for (std::size_t i = 0; i < 5; ++i) expect.push_back(all[i].second);
      ASSERT_EQ(t.top_m_synonyms(t.word(q), 5), expect) << "query " << t.word(q);
    }
  }
}

TEST(TopMSynonyms, LengthAndExclusion) {
  const EmbeddingTable t = random_table(7, 3, 4);
  for (std::size_t m : {1u, 3u, 6u, 10u}) {
    const auto r = t.top_m_synonyms("w2", m);
    EXPECT_EQ(r.size(), std::min<std::size_t>(m, 6));
    EXPECT_EQ(std::count(r.begin(), r.end(), "w2"), 0);
  }
  EXPECT_THROW(t.top_m_synonyms("w2", 0), Error);
  EXPECT_THROW(t.top_m_synonyms("absent", 3), Error);
}

TEST(TopMSynonyms, ScaleInvariance) {
  const EmbeddingTable t = random_table(30, 5, 8);
  EmbeddingTable scaled;
  for (std::size_t i = 0; i < t.size(); ++i) {
    auto v = t.vector(i);
    for (auto& x : v) x *= 0.5 + static_cast<double>(i % 4);
    scaled.add(t.word(i), v);
  }
  for (std::size_t i = 0; i < t.size(); ++i)
    EXPECT_EQ(scaled.top_m_synonyms(t.word(i), 4), t.top_m_synonyms(t.word(i), 4));
}

TEST(Lookup, LowercaseFallback) {
  const auto t = EmbeddingTable::parse("good 1 0\nGood 0 1\nfine 1 1\n");
  EXPECT_EQ(t.lookup("Good"), 1u);
  EXPECT_EQ(t.lookup("GOOD"), 0u);
  EXPECT_EQ(t.lookup("Fine"), 2u);
  EXPECT_FALSE(t.lookup("bad").has_value());
}

TEST(FixtureTable, SynonymsStayInGroup) {
  const auto table = fixtures::embeddings(fixtures::Seeds{}.embeddings());
  for (const auto& g : fixtures::positive_groups()) {
    const auto syn = table.top_m_synonyms(g[0], 5);
    for (const auto& s : syn) EXPECT_NE(std::find(g.begin(), g.end(), s), g.end()) << g[0] << " -> " << s;
  }
}
