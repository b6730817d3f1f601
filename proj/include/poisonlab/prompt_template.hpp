#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "poisonlab/common.hpp"
#include "poisonlab/vocabulary.hpp"

namespace poisonlab {

struct LabeledText {
  std::string text;
  std::string label;
  bool operator==(const LabeledText&) const = default;
};

/// Demonstration template written as a single pattern with {input}, {output} and {query}
/// placeholders, for example "{input}→{output}\n{query}→". A pattern decomposes as
///
///   P {input} A {output} S P {query} A
///
/// where P is the input prefix, A the answer delimiter and S the shot separator. A k-shot
/// prompt renders as (P x_i A y_i S) for each shot followed by P q A.
class PromptTemplate {
 public:
  static PromptTemplate from_pattern(std::string name, std::string_view pattern) {
    constexpr std::string_view kIn = "{input}", kOut = "{output}", kQuery = "{query}";
    auto find_once = [&](std::string_view ph) {
      const auto pos = pattern.find(ph);
      if (pos == std::string_view::npos)
        throw config_error("template '" + name + "' is missing the " + std::string(ph) + " placeholder");
      if (pattern.find(ph, pos + 1) != std::string_view::npos)
        throw config_error("template '" + name + "' repeats the " + std::string(ph) + " placeholder");
      return pos;
    };
    const auto in = find_once(kIn), out = find_once(kOut), query = find_once(kQuery);
    if (!(in < out && out < query))
      throw config_error("template '" + name + "' must order {input} < {output} < {query}");

    PromptTemplate t;
    t.name_ = std::move(name);
    t.pattern_ = std::string(pattern);
    t.prefix_ = std::string(pattern.substr(0, in));
    t.delimiter_ = std::string(pattern.substr(in + kIn.size(), out - in - kIn.size()));
    const std::string between(pattern.substr(out + kOut.size(), query - out - kOut.size()));
    const std::string tail(pattern.substr(query + kQuery.size()));
    if (t.delimiter_.empty()) throw config_error("template '" + t.name_ + "' has an empty answer delimiter");
    if (tail != t.delimiter_)
      throw config_error("template '" + t.name_ + "' must end the query frame with the answer delimiter");
    if (between.size() < t.prefix_.size() || between.compare(between.size() - t.prefix_.size(), t.prefix_.size(), t.prefix_) != 0)
      throw config_error("template '" + t.name_ + "' must repeat the input prefix before {query}");
    t.separator_ = between.substr(0, between.size() - t.prefix_.size());
    if (t.separator_.empty() && t.prefix_.empty())
      throw config_error("template '" + t.name_ + "' needs a shot separator or an input prefix");
    return t;
  }

  /// F1 is the default arrow template; F2 and F3 are alternative frames used in sweeps.
  static PromptTemplate builtin(std::string_view name) {
    if (name == "F1") return from_pattern("F1", std::string("{input}") + std::string(Vocabulary::kArrow) +
                                                    "{output}\n{query}" + std::string(Vocabulary::kArrow));
    if (name == "F2") return from_pattern("F2", "Input: {input}\nLabel: {output}\n\nInput: {query}\nLabel: ");
    if (name == "F3") return from_pattern("F3", "Text: {input} | Answer: {output}\nText: {query} | Answer: ");
    throw config_error("unknown built-in template '" + std::string(name) + "'");
  }

  static PromptTemplate default_template() { return builtin("F1"); }

  /// Built-in name or a literal pattern.
  static PromptTemplate resolve(std::string_view spec) {
    if (spec == "F1" || spec == "F2" || spec == "F3") return builtin(spec);
    return from_pattern("custom:" + digest_of(spec).substr(0, 8), spec);
  }

  const std::string& name() const { return name_; }
  const std::string& pattern() const { return pattern_; }
  const std::string& input_prefix() const { return prefix_; }
  const std::string& answer_delimiter() const { return delimiter_; }
  const std::string& shot_separator() const { return separator_; }

  std::string render_shot(std::string_view input, std::string_view output) const {
    std::string s = prefix_;
    s += input;
    s += delimiter_;
    s += output;
    s += separator_;
    return s;
  }

  std::string render_query(std::string_view query) const {
    std::string s = prefix_;
    s += query;
    s += delimiter_;
    return s;
  }

  std::string render(const std::vector<LabeledText>& shots, std::string_view query) const {
    std::string s;
    for (const auto& shot : shots) s += render_shot(shot.text, shot.label);
    s += render_query(query);
    return s;
  }

  struct Parsed {
    std::vector<LabeledText> shots;
    std::string query;
    bool operator==(const Parsed&) const = default;
  };

  /// Inverse of render. Fails (nullopt) when inputs contain the delimiter or labels contain
  /// the separator+prefix sequence, since the split is then ambiguous.
  std::optional<Parsed> parse(std::string_view text) const {
    Parsed out;
    const std::string next_shot = separator_ + prefix_;
    std::size_t pos = 0;
    if (text.compare(0, prefix_.size(), prefix_) != 0) return std::nullopt;
    pos = prefix_.size();
    for (;;) {
      const auto a = text.find(delimiter_, pos);
      if (a == std::string_view::npos) return std::nullopt;
      std::string input(text.substr(pos, a - pos));
      pos = a + delimiter_.size();
      if (pos == text.size()) {
        out.query = std::move(input);
        return out;
      }
      const auto sp = text.find(next_shot, pos);
      if (sp == std::string_view::npos) return std::nullopt;
      out.shots.push_back({std::move(input), std::string(text.substr(pos, sp - pos))});
      pos = sp + next_shot.size();
    }
  }

 private:
  PromptTemplate() = default;

  std::string name_, pattern_, prefix_, delimiter_, separator_;
};

}  // namespace poisonlab
