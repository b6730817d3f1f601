#pragma once

// Line-delimited labeled records: one JSON object per line with string fields "text"
// and "label". Blank lines are skipped. Other fields are ignored on ingestion, except
// "provenance", which pool files may carry.
//
// Canonical form, produced by emit_dataset: {"label":...,"text":...} with compact
// separators and one record per line, in input order.

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "poisonlab/common.hpp"
#include "poisonlab/harness.hpp"
#include "poisonlab/prompt_template.hpp"
#include "poisonlab/text_units.hpp"

namespace poisonlab {

struct Dataset {
  std::string source;
  std::vector<LabeledText> records;
  std::vector<Provenance> provenance;
  std::vector<std::string> label_space;
  /// (line, line of the first occurrence) for records repeating an earlier text and label.
  std::vector<std::pair<std::size_t, std::size_t>> duplicates;

  std::size_t size() const { return records.size(); }
  PromptSet as_prompt_set() const { return {records, provenance}; }
};

inline Dataset parse_dataset(std::string_view content, const std::string& source = "<memory>") {
  Dataset ds;
  ds.source = source;
  std::map<std::pair<std::string, std::string>, std::size_t> seen;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    return data_error(source + " line " + std::to_string(line_no) + ": " + what);
  };
  for (const auto& raw : split_lines(content)) {
    ++line_no;
    std::string_view line(raw);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw fail("malformed JSON record");
    }
    if (!j.is_object()) throw fail("record is not an object");
    for (const char* field : {"text", "label"}) {
      if (!j.contains(field)) throw fail(std::string("missing field '") + field + "'");
      if (!j[field].is_string()) throw fail(std::string("field '") + field + "' is not a string");
    }
    LabeledText rec{j["text"].get<std::string>(), j["label"].get<std::string>()};
    if (rec.text.empty()) throw fail("empty text");
    if (rec.label.empty()) throw fail("empty label");
    for (const std::string* f : {&rec.text, &rec.label})
      if (const auto bad = text_domain_violation(*f); !bad.empty()) throw fail(bad);
    Provenance prov = Provenance::clean;
    if (j.contains("provenance")) {
      if (!j["provenance"].is_string()) throw fail("field 'provenance' is not a string");
      try {
        prov = parse_provenance(j["provenance"].get<std::string>());
      } catch (const Error& e) {
        throw fail(e.what());
      }
    }
    const auto [it, inserted] = seen.emplace(std::make_pair(rec.text, rec.label), line_no);
    if (!inserted) ds.duplicates.emplace_back(line_no, it->second);
    ds.records.push_back(std::move(rec));
    ds.provenance.push_back(prov);
  }
  if (ds.records.empty()) throw data_error(source + ": no records");
  ds.label_space = label_space_of(ds.records);
  return ds;
}

inline Dataset ingest_dataset(const std::filesystem::path& path) { return parse_dataset(read_file(path), path.string()); }

inline std::string emit_dataset(const std::vector<LabeledText>& records) {
  std::string out;
  for (const auto& r : records) out += nlohmann::json{{"text", r.text}, {"label", r.label}}.dump() + "\n";
  return out;
}

inline std::string emit_dataset(const Dataset& ds) { return emit_dataset(ds.records); }

}  // namespace poisonlab
