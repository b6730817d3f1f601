#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "poisonlab/common.hpp"
#include "poisonlab/text_units.hpp"

namespace poisonlab {

using TokenId = std::uint32_t;

struct Tokenization {
  std::vector<TokenId> ids;
  /// Set when some input was absorbed by UNK, so detokenize cannot reproduce it.
  bool lossy = false;
};

/// Ordered token strings; the line order of the vocabulary file defines the ids.
/// Tokenization is greedy longest-match, left to right, over the non-special entries.
class Vocabulary {
 public:
  static constexpr std::string_view kBosName = "<bos>";
  static constexpr std::string_view kUnkName = "<unk>";
  static constexpr std::string_view kArrow = "\xe2\x86\x92";  // U+2192, the default answer delimiter

  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const std::string& t = tokens_[i];
      if (t.empty()) throw data_error("vocabulary entry " + std::to_string(i) + " is empty");
      if (!index_.emplace(t, static_cast<TokenId>(i)).second)
        throw data_error("duplicate vocabulary entry '" + t + "' at id " + std::to_string(i));
    }
    const auto bos = index_.find(std::string(kBosName));
    const auto unk = index_.find(std::string(kUnkName));
    if (bos == index_.end() || unk == index_.end())
      throw data_error("vocabulary must declare both <bos> and <unk>");
    bos_ = bos->second;
    unk_ = unk->second;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (is_special(static_cast<TokenId>(i))) continue;
      by_first_byte_[static_cast<unsigned char>(tokens_[i][0])].push_back(static_cast<TokenId>(i));
    }
    for (auto& bucket : by_first_byte_) {
      std::stable_sort(bucket.begin(), bucket.end(), [this](TokenId a, TokenId b) {
        return tokens_[a].size() > tokens_[b].size();
      });
    }
  }

  /// Character-level vocabulary: specials, the ordered character set, then newline and
  /// the arrow delimiter.
  static Vocabulary character_level(const CharacterSet& chars = CharacterSet::printable_ascii()) {
    std::vector<std::string> tokens{std::string(kBosName), std::string(kUnkName)};
    for (char c : chars.chars()) tokens.emplace_back(1, c);
    tokens.emplace_back("\n");
    tokens.emplace_back(kArrow);
    return Vocabulary(std::move(tokens));
  }

  std::size_t size() const { return tokens_.size(); }
  TokenId bos() const { return bos_; }
  TokenId unk() const { return unk_; }
  bool is_special(TokenId id) const { return id == bos_ || id == unk_; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<TokenId> find(std::string_view s) const {
    const auto it = index_.find(std::string(s));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  Tokenization tokenize(std::string_view text, bool add_bos = true) const {
    Tokenization out;
    if (add_bos) out.ids.push_back(bos_);
    std::size_t pos = 0;
    while (pos < text.size()) {
      bool matched = false;
      for (TokenId id : by_first_byte_[static_cast<unsigned char>(text[pos])]) {
        const std::string& t = tokens_[id];
        if (text.compare(pos, t.size(), t) == 0) {
          out.ids.push_back(id);
          pos += t.size();
          matched = true;
          break;
        }
      }
      if (!matched) {
        out.ids.push_back(unk_);
        out.lossy = true;
        pos += utf8_length(static_cast<unsigned char>(text[pos]));
      }
    }
    return out;
  }

  /// Concatenates token strings; BOS and UNK render as nothing.
  std::string detokenize(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id >= tokens_.size()) throw data_error("token id " + std::to_string(id) + " out of vocabulary");
      if (is_special(id)) continue;
      out += tokens_[id];
    }
    return out;
  }

  /// Tokens whose strings lie entirely inside the example text domain, in id order.
  /// These are the legal adversarial-suffix candidates.
  std::vector<TokenId> text_domain_tokens() const {
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const auto id = static_cast<TokenId>(i);
      if (is_special(id)) continue;
      if (text_domain_violation(tokens_[i]).empty()) out.push_back(id);
    }
    return out;
  }

  // ---- vocabulary file: one token per line, with \n \s \t \\ escapes ----

  static std::string escape(std::string_view token) {
    std::string out;
    for (char c : token) {
      switch (c) {
        case '\n': out += "\\n"; break;
        case '\t': out += "\\t"; break;
        case ' ': out += "\\s"; break;
        case '\\': out += "\\\\"; break;
        default: out.push_back(c);
      }
    }
    return out;
  }

  static std::string unescape(std::string_view line, std::size_t line_no) {
    std::string out;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] != '\\') {
        out.push_back(line[i]);
        continue;
      }
      if (i + 1 == line.size())
        throw data_error("vocabulary line " + std::to_string(line_no) + ": dangling escape");
      switch (line[++i]) {
        case 'n': out.push_back('\n'); break;
        case 't': out.push_back('\t'); break;
        case 's': out.push_back(' '); break;
        case '\\': out.push_back('\\'); break;
        default:
          throw data_error("vocabulary line " + std::to_string(line_no) + ": unknown escape \\" +
                           std::string(1, line[i]));
      }
    }
    return out;
  }

  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) {
      out += escape(t);
      out.push_back('\n');
    }
    return out;
  }

  static Vocabulary parse(std::string_view text) {
    std::vector<std::string> tokens;
    std::size_t line_no = 0;
    for (const auto& line : split_lines(text)) {
      ++line_no;
      tokens.push_back(unescape(line, line_no));
    }
    return Vocabulary(std::move(tokens));
  }

  static Vocabulary load(const std::filesystem::path& path) { return parse(read_file(path)); }
  void save(const std::filesystem::path& path) const { write_file(path, serialize()); }

 private:
  static std::size_t utf8_length(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead >> 5) == 0x6) return 2;
    if ((lead >> 4) == 0xe) return 3;
    if ((lead >> 3) == 0x1e) return 4;
    return 1;
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::array<std::vector<TokenId>, 256> by_first_byte_{};
  TokenId bos_ = 0;
  TokenId unk_ = 0;
};

}  // namespace poisonlab
