#pragma once

// Text-format word embeddings ("word c1 c2 ... cd" per line) with exhaustive cosine
// nearest-neighbour queries.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "poisonlab/common.hpp"

namespace poisonlab {

class EmbeddingTable {
 public:
  EmbeddingTable() = default;

  void add(std::string word, std::vector<double> vec) {
    if (dim_ == 0 && words_.empty()) dim_ = vec.size();
    if (vec.size() != dim_) throw data_error("embedding for '" + word + "' has dimension " + std::to_string(vec.size()) +
                                             ", table has " + std::to_string(dim_));
    for (double v : vec)
      if (!std::isfinite(v)) throw data_error("embedding for '" + word + "' has a non-finite component");
    if (!index_.emplace(word, words_.size()).second) throw data_error("duplicate word '" + word + "'");
    double n = 0.0;
    for (double v : vec) n += v * v;
    norms_.push_back(std::sqrt(n));
    words_.push_back(std::move(word));
    vectors_.push_back(std::move(vec));
  }

  static EmbeddingTable parse(std::string_view text) {
    EmbeddingTable table;
    std::size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
      ++line_no;
      std::string_view rest(line);
      if (!rest.empty() && rest.back() == '\r') rest.remove_suffix(1);
      if (rest.find_first_not_of(' ') == std::string_view::npos) continue;
      auto next_field = [&]() -> std::string_view {
        const auto b = rest.find_first_not_of(' ');
        if (b == std::string_view::npos) return {};
        const auto e = rest.find(' ', b);
        const auto f = rest.substr(b, e == std::string_view::npos ? std::string_view::npos : e - b);
        rest = e == std::string_view::npos ? std::string_view{} : rest.substr(e);
        return f;
      };
      std::string word(next_field());
      std::vector<double> vec;
      for (auto f = next_field(); !f.empty(); f = next_field()) {
        double v = 0.0;
        const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
        if (ec != std::errc() || ptr != f.data() + f.size())
          throw data_error("embeddings line " + std::to_string(line_no) + ": non-numeric component '" +
                           std::string(f) + "'");
        vec.push_back(v);
      }
      if (vec.empty()) throw data_error("embeddings line " + std::to_string(line_no) + ": no components");
      if (!table.words_.empty() && vec.size() != table.dim_)
        throw data_error("embeddings line " + std::to_string(line_no) + ": dimension mismatch (" +
                         std::to_string(vec.size()) + " vs " + std::to_string(table.dim_) + ")");
      try {
        table.add(std::move(word), std::move(vec));
      } catch (const Error& e) {
        throw data_error("embeddings line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    return table;
  }

  static EmbeddingTable load(const std::filesystem::path& path) { return parse(read_file(path)); }

  /// Shortest round-trip decimal form for every component.
  std::string serialize() const {
    std::string out;
    char buf[64];
    for (std::size_t i = 0; i < words_.size(); ++i) {
      out += words_[i];
      for (double v : vectors_[i]) {
        const auto r = std::to_chars(buf, buf + sizeof buf, v);
        out.push_back(' ');
        out.append(buf, r.ptr);
      }
      out.push_back('\n');
    }
    return out;
  }

  std::size_t size() const { return words_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<std::string>& words() const { return words_; }

  /// Exact match first, then the lowercase form.
  std::optional<std::size_t> lookup(std::string_view word) const {
    if (auto it = index_.find(std::string(word)); it != index_.end()) return it->second;
    std::string lower(word);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (auto it = index_.find(lower); it != index_.end()) return it->second;
    return std::nullopt;
  }

  const std::vector<double>& vector(std::size_t i) const { return vectors_[i]; }
  const std::string& word(std::size_t i) const { return words_[i]; }

  /// Cosine similarity; 0 when either vector has zero norm.
  double cosine(std::size_t a, std::size_t b) const {
    if (norms_[a] == 0.0 || norms_[b] == 0.0) return 0.0;
    double dot = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) dot += vectors_[a][i] * vectors_[b][i];
    return dot / (norms_[a] * norms_[b]);
  }

  /// Up to m other words by non-increasing cosine similarity, ties lexicographic.
  /// Throws when the word is absent; callers treat that as "skip this word".
  std::vector<std::string> top_m_synonyms(std::string_view word, std::size_t m) const {
    if (m == 0) throw config_error("synonym count m must be positive");
    const auto q = lookup(word);
    if (!q) throw data_error("word '" + std::string(word) + "' is not in the embedding table");
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(words_.size());
    for (std::size_t i = 0; i < words_.size(); ++i)
      if (i != *q) scored.emplace_back(cosine(*q, i), i);
    const std::size_t keep = std::min(m, scored.size());
    auto better = [this](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return words_[a.second] < words_[b.second];
    };
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), better);
    std::vector<std::string> out;
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out.push_back(words_[scored[i].second]);
    return out;
  }

 private:
  std::vector<std::string> words_;
  std::vector<std::vector<double>> vectors_;
  std::vector<double> norms_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t dim_ = 0;
};

}  // namespace poisonlab
