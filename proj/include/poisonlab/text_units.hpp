#pragma once

// Segmentation of example text into the perturbation granularities: words and
// characters. Token-level segmentation lives in vocabulary.hpp.

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "poisonlab/common.hpp"

namespace poisonlab {

/// Ordered candidate alphabet for character replacement: printable ASCII in code-point
/// order (space, punctuation, digits, uppercase, lowercase).
class CharacterSet {
 public:
  static const CharacterSet& printable_ascii() {
    static const CharacterSet set = [] {
      std::string chars;
      for (int c = 0x20; c <= 0x7e; ++c) chars.push_back(static_cast<char>(c));
      return CharacterSet(chars);
    }();
    return set;
  }

  /// Custom alphabets are mostly for tests; duplicates are rejected.
  explicit CharacterSet(std::string chars) : chars_(std::move(chars)) {
    std::array<bool, 256> seen{};
    for (unsigned char c : chars_) {
      if (c >= 0x80) throw config_error("character set must be ASCII");
      if (seen[c]) throw config_error(std::string("duplicate character in set: '") + char(c) + "'");
      seen[c] = true;
    }
    member_ = seen;
  }

  std::string_view chars() const { return chars_; }
  std::size_t size() const { return chars_.size(); }
  char operator[](std::size_t i) const { return chars_[i]; }
  bool contains(char c) const { return member_[static_cast<unsigned char>(c)]; }

 private:
  std::string chars_;
  std::array<bool, 256> member_{};
};

/// Text domain shared by datasets, perturbations and paraphraser output: printable ASCII.
inline bool in_text_domain(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u >= 0x20 && u <= 0x7e;
}

/// Empty string on success, otherwise a description of the first violation.
inline std::string text_domain_violation(std::string_view text) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto u = static_cast<unsigned char>(text[i]);
    if (u >= 0x80) return "non-ASCII byte at offset " + std::to_string(i);
    if (!in_text_domain(text[i])) return "control character at offset " + std::to_string(i);
  }
  return {};
}

inline bool is_word_separator(char c) {
  const auto u = static_cast<unsigned char>(c);
  if (u == ' ' || u == '\t' || u == '\n' || u == '\r' || u == '\v' || u == '\f') return true;
  // ASCII punctuation: !"#$%&'()*+,-./ :;<=>?@ [\]^_` {|}~
  return (u >= 0x21 && u <= 0x2f) || (u >= 0x3a && u <= 0x40) || (u >= 0x5b && u <= 0x60) ||
         (u >= 0x7b && u <= 0x7e);
}

struct WordSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Words plus the separator runs around them. separators.size() == words.size() + 1:
/// separators[0] precedes the first word, separators[i] sits between words i-1 and i,
/// and separators.back() trails the last word.
struct WordSegmentation {
  std::vector<std::string> words;
  std::vector<WordSpan> spans;
  std::vector<std::string> separators;

  std::size_t size() const { return words.size(); }

  std::string reconstruct() const {
    std::string out = separators.front();
    for (std::size_t i = 0; i < words.size(); ++i) {
      out += words[i];
      out += separators[i + 1];
    }
    return out;
  }

  /// Text with word i replaced by `replacement`.
  std::string with_word(std::size_t i, std::string_view replacement) const {
    std::string out = separators.front();
    for (std::size_t j = 0; j < words.size(); ++j) {
      out += (j == i) ? std::string(replacement) : words[j];
      out += separators[j + 1];
    }
    return out;
  }

  /// Text with word i deleted along with its left separator run, or its right separator
  /// run when it is the leftmost word. The only word deletes to its surrounding separators.
  std::string without_word(std::size_t i) const {
    const std::size_t n = words.size();
    if (n == 1) return separators[0] + separators[1];
    std::string out = separators.front();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) {
        if (i > 0) out += separators[j + 1];
        continue;
      }
      out += words[j];
      if (j + 1 != i) out += separators[j + 1];
    }
    return out;
  }
};

inline WordSegmentation split_words(std::string_view text) {
  WordSegmentation seg;
  std::size_t pos = 0;
  std::string sep;
  while (pos < text.size()) {
    if (is_word_separator(text[pos])) {
      sep.push_back(text[pos++]);
      continue;
    }
    const std::size_t begin = pos;
    while (pos < text.size() && !is_word_separator(text[pos])) ++pos;
    seg.separators.push_back(std::move(sep));
    sep.clear();
    seg.words.emplace_back(text.substr(begin, pos - begin));
    seg.spans.push_back({begin, pos});
  }
  seg.separators.push_back(std::move(sep));
  return seg;
}

struct CharUnit {
  std::size_t offset = 0;
  char value = 0;
  bool operator==(const CharUnit&) const = default;
};

/// Byte-offset enumeration over an ASCII text; multi-byte input is outside the domain.
inline std::vector<CharUnit> enumerate_chars(std::string_view text) {
  if (!is_ascii(text)) throw data_error("enumerate_chars: text is not ASCII");
  std::vector<CharUnit> units;
  units.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) units.push_back({i, text[i]});
  return units;
}

inline std::string without_char(std::string_view text, std::size_t offset) {
  std::string out(text);
  out.erase(offset, 1);
  return out;
}

inline std::string with_char(std::string_view text, std::size_t offset, char c) {
  std::string out(text);
  out[offset] = c;
  return out;
}

}  // namespace poisonlab
