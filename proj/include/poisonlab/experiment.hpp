#pragma once

// Experiment orchestration: poison -> mix -> evaluate -> defend over the cross product
// of the configured sweep axes, writing every intermediate result as an artifact and
// assembling the report from those artifacts alone.
//
// Output tree (under `out`):
//   artifacts/poison/<dataset>/<strategy>-k<budget>.jsonl     poisoned pools
//   artifacts/poison/<dataset>/<strategy>-k<budget>.cost.json model evaluations
//   artifacts/pools/<dataset>/<strategy>-k<budget>-r<rate>.jsonl
//   artifacts/eval/<dataset>/<target>/<template>/s<shots>/<cell>.json
//   artifacts/defense/<dataset>/...                           perplexity and filter results
//   artifacts/plan.json        report skeleton: config echo, cells, stage errors
//   artifacts/manifest.json    digest of every artifact above
//   timing/<dataset>/<strategy>-k<budget>.jsonl               wall-clock, not digested
//   report.json, report.md     deterministic
//   timing.json, timing.md     wall-clock tables

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "poisonlab/attacks.hpp"
#include "poisonlab/common.hpp"
#include "poisonlab/dataset.hpp"
#include "poisonlab/defense.hpp"
#include "poisonlab/embeddings.hpp"
#include "poisonlab/harness.hpp"
#include "poisonlab/model_io.hpp"

#ifndef POISONLAB_VERSION
#define POISONLAB_VERSION "0.0.0"
#endif

namespace poisonlab {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::string_view kToolName = "poisonlab";
inline constexpr std::string_view kCacheEnv = "POISONLAB_CACHE";

inline const std::vector<Strategy>& report_strategy_order() {
  static const std::vector<Strategy> order{Strategy::clean, Strategy::random_label, Strategy::synonym,
                                           Strategy::character, Strategy::suffix};
  return order;
}

struct DatasetSpec {
  std::string name;
  std::string train;
  std::string test;
};

struct DefenseSpec {
  std::string scorer;
  double quantile = 0.95;
};

struct ExperimentConfig {
  fs::path base_dir = ".";
  std::vector<DatasetSpec> datasets;
  std::string surrogate;
  std::vector<std::string> targets;
  std::string embeddings;
  std::vector<Strategy> strategies{Strategy::random_label, Strategy::synonym, Strategy::character, Strategy::suffix};
  std::vector<std::size_t> budgets{5};
  std::size_t synonym_m = 10;
  bool allow_noop_candidate = false;
  std::vector<double> rates{1.0};
  std::vector<std::string> templates{"F1"};
  std::string attack_template;  // empty: first of `templates`
  std::vector<std::size_t> shots{5};
  std::size_t runs = 5;
  std::uint64_t seed = 0;
  std::string out = "out";
  std::optional<DefenseSpec> defense;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  fs::path out_dir() const { return resolve(out); }

  const std::string& probe_template() const { return attack_template.empty() ? templates.front() : attack_template; }

  bool uses(Strategy s) const { return std::find(strategies.begin(), strategies.end(), s) != strategies.end(); }

  static ExperimentConfig from_json(const json& j, fs::path base_dir) {
    ExperimentConfig c;
    c.base_dir = std::move(base_dir);
    try {
      if (!j.is_object()) throw config_error("experiment config must be an object");
      static const std::set<std::string> known{"datasets", "surrogate", "targets",  "embeddings", "strategies",
                                               "budgets",  "synonym_m", "allow_noop_candidate", "rates",
                                               "templates", "attack_template", "shots", "runs", "seed",
                                               "out",       "defense"};
      for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw config_error("unknown config key '" + key + "'");
      for (const auto& d : j.at("datasets"))
        c.datasets.push_back({d.at("name").get<std::string>(), d.at("train").get<std::string>(),
                              d.at("test").get<std::string>()});
      c.surrogate = j.at("surrogate").get<std::string>();
      c.targets = j.value("targets", std::vector<std::string>{c.surrogate});
      c.embeddings = j.value("embeddings", std::string());
      if (j.contains("strategies")) {
        c.strategies.clear();
        for (const auto& s : j["strategies"]) c.strategies.push_back(parse_strategy(s.get<std::string>()));
      }
      c.budgets = j.value("budgets", c.budgets);
      c.synonym_m = j.value("synonym_m", c.synonym_m);
      c.allow_noop_candidate = j.value("allow_noop_candidate", c.allow_noop_candidate);
      c.rates = j.value("rates", c.rates);
      c.templates = j.value("templates", c.templates);
      c.attack_template = j.value("attack_template", std::string());
      c.shots = j.value("shots", c.shots);
      c.runs = j.value("runs", c.runs);
      c.seed = j.value("seed", c.seed);
      c.out = j.value("out", c.out);
      if (j.contains("defense") && !j["defense"].is_null()) {
        const auto& d = j["defense"];
        c.defense = DefenseSpec{d.at("scorer").get<std::string>(), d.value("quantile", 0.95)};
      }
    } catch (const json::exception& e) {
      throw config_error(std::string("malformed experiment config: ") + e.what());
    }
    return c;
  }

  static ExperimentConfig load(const fs::path& path) {
    json j;
    try {
      j = json::parse(read_file(path));
    } catch (const json::exception& e) {
      throw config_error("experiment config " + path.string() + " is not valid JSON: " + e.what());
    } catch (const Error& e) {
      throw config_error(e.what());
    }
    return from_json(j, path.parent_path().empty() ? fs::path(".") : path.parent_path());
  }

  /// Every knob, defaults included, so a report alone reconstructs the run. The output
  /// location is left out: moving a run must not change its report.
  json to_json() const {
    json ds = json::array();
    for (const auto& d : datasets) ds.push_back({{"name", d.name}, {"train", d.train}, {"test", d.test}});
    json strat = json::array();
    for (auto s : strategies) strat.push_back(std::string(to_string(s)));
    json j{{"datasets", ds},
           {"surrogate", surrogate},
           {"targets", targets},
           {"embeddings", embeddings},
           {"strategies", strat},
           {"budgets", budgets},
           {"synonym_m", synonym_m},
           {"allow_noop_candidate", allow_noop_candidate},
           {"rates", rates},
           {"templates", templates},
           {"attack_template", probe_template()},
           {"shots", shots},
           {"runs", runs},
           {"seed", seed}};
    j["defense"] = defense ? json{{"scorer", defense->scorer}, {"quantile", defense->quantile}} : json(nullptr);
    return j;
  }

  void validate() const {
    auto need = [&](const std::string& what, const std::string& p) {
      if (p.empty()) throw config_error(what + " path is empty");
      if (!fs::exists(resolve(p))) throw config_error(what + " '" + p + "' does not exist");
    };
    if (datasets.empty()) throw config_error("config lists no datasets");
    std::set<std::string> names;
    for (const auto& d : datasets) {
      if (d.name.empty()) throw config_error("dataset name is empty");
      if (!names.insert(d.name).second) throw config_error("duplicate dataset name '" + d.name + "'");
      need("train set of " + d.name, d.train);
      need("test set of " + d.name, d.test);
    }
    need("surrogate model", surrogate);
    if (targets.empty()) throw config_error("config lists no target models");
    for (const auto& t : targets) need("target model", t);
    if (uses(Strategy::synonym)) need("embedding table", embeddings);
    std::set<Strategy> seen;
    for (auto s : strategies) {
      if (s == Strategy::clean) throw config_error("'clean' is always evaluated and cannot be listed as a strategy");
      if (!seen.insert(s).second) throw config_error("strategy '" + std::string(to_string(s)) + "' listed twice");
    }
    if (budgets.empty()) throw config_error("budgets must not be empty");
    for (auto k : budgets)
      if (k < 1) throw config_error("every budget must be >= 1");
    if (synonym_m < 1) throw config_error("synonym_m must be >= 1");
    if (rates.empty()) throw config_error("rates must not be empty");
    for (double r : rates)
      if (!(r >= 0.0 && r <= 1.0)) throw config_error("every rate must lie in [0, 1]");
    if (templates.empty()) throw config_error("templates must not be empty");
    for (const auto& t : templates) (void)PromptTemplate::resolve(t);
    (void)PromptTemplate::resolve(probe_template());
    if (shots.empty()) throw config_error("shots must not be empty");
    for (auto s : shots)
      if (s < 1) throw config_error("every shot count must be >= 1");
    if (runs < 1) throw config_error("runs must be >= 1");
    if (defense) {
      need("defense scorer", defense->scorer);
      if (!(defense->quantile > 0.0 && defense->quantile <= 1.0))
        throw config_error("defense quantile must lie in (0, 1]");
    }
  }
};

// ---------------------------------------------------------------------------------------
// Small helpers

inline std::string path_token(std::string s) {
  for (char& c : s)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '-';
  return s;
}

inline std::string rate_token(double rate) { return fixed(rate, 2); }

inline std::string cell_name(Strategy s, std::size_t budget, std::optional<double> rate = std::nullopt) {
  std::string n(to_string(s));
  if (budget > 0) n += "-k" + std::to_string(budget);
  if (rate) n += "-r" + rate_token(*rate);
  return n;
}

/// Digest over every regular file below the model's directory, in path order.
inline std::string model_digest(const fs::path& model_path) {
  const fs::path dir = manifest_file(model_path).parent_path();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = kFnvOffset;
  for (const auto& f : files) {
    h = fnv1a(fs::relative(f, dir).generic_string(), h);
    h = fnv1a(read_file(f), h);
  }
  return hex64(h);
}

inline std::vector<LabeledText> poisoned_items(const PoisonRun& run) {
  std::vector<LabeledText> out;
  out.reserve(run.examples.size());
  for (const auto& e : run.examples) out.push_back(e.poisoned());
  return out;
}

inline std::string poisoned_lines(const PoisonRun& run) {
  std::string out;
  for (const auto& e : run.examples) out += poisoned_record(e).dump() + "\n";
  return out;
}

inline std::string timing_lines(const PoisonRun& run) {
  std::string out;
  for (std::size_t i = 0; i < run.time_ms.size(); ++i)
    out += json{{"index", i}, {"time_ms", run.time_ms[i]}}.dump() + "\n";
  return out;
}

/// Reads back a poisoned pool file: text, label and evaluation count per record.
inline PoisonRun parse_poisoned_lines(std::string_view content, std::string_view timing) {
  PoisonRun run;
  for (const auto& line : split_lines(content)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    PoisonedExample e;
    e.text = j.at("text").get<std::string>();
    e.label = j.at("label").get<std::string>();
    e.evaluations = j.value("evaluations", std::uint64_t{0});
    e.failure = j.value("failure", std::string());
    run.examples.push_back(std::move(e));
  }
  for (const auto& line : split_lines(timing))
    if (!line.empty()) run.time_ms.push_back(json::parse(line).at("time_ms").get<double>());
  run.time_ms.resize(run.examples.size(), 0.0);
  return run;
}

inline fs::path cache_root(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv(std::string(kCacheEnv).c_str()); env && *env) return fs::path(env);
  return cfg.out_dir() / "cache";
}

// ---------------------------------------------------------------------------------------
// Report

struct Report {
  json document;
  std::string markdown;
  json timing;
  std::string timing_markdown;
  bool complete() const { return document.value("complete", false); }
};

namespace detail {

inline std::string pct(const json& r) {
  return fixed(100.0 * r.at("mean").get<double>(), 1) + " ± " + fixed(100.0 * r.at("stderr").get<double>(), 1);
}

inline std::string nll(const json& r) {
  return fixed(r.at("mean").get<double>(), 3) + " ± " + fixed(r.at("stderr").get<double>(), 3);
}

inline std::string budget_cell(std::size_t k) { return k == 0 ? "-" : std::to_string(k); }

}  // namespace detail

/// Rebuilds the report from `out/artifacts`. Every artifact digest is checked against the
/// manifest first; a mismatch is a hard error.
inline Report emit_report(const fs::path& out_dir) {
  const fs::path art = out_dir / "artifacts";
  if (!fs::exists(art / "manifest.json")) throw data_error("missing artifact manifest " + (art / "manifest.json").string());
  if (!fs::exists(art / "plan.json")) throw data_error("missing artifact " + (art / "plan.json").string());
  json manifest, plan;
  try {
    manifest = json::parse(read_file(art / "manifest.json"));
  } catch (const json::exception& e) {
    throw data_error(std::string("malformed artifact manifest: ") + e.what());
  }
  for (const auto& [rel, digest] : manifest.at("artifacts").items()) {
    const fs::path p = art / rel;
    if (!fs::exists(p)) throw data_error("missing artifact " + rel);
    if (digest_of(read_file(p)) != digest.get<std::string>()) throw data_error("artifact digest mismatch: " + rel);
  }
  if (digest_of(read_file(art / "plan.json")) != manifest.at("plan").get<std::string>())
    throw data_error("artifact digest mismatch: plan.json");
  plan = json::parse(read_file(art / "plan.json"));
  auto load = [&](const std::string& rel) -> json {
    if (!manifest.at("artifacts").contains(rel)) throw data_error("report cell refers to undeclared artifact " + rel);
    return json::parse(read_file(art / rel));
  };

  Report rep;
  json& doc = rep.document;
  doc["tool"] = plan.at("tool");
  doc["version"] = plan.at("version");
  doc["config"] = plan.at("config");
  doc["config_digest"] = plan.at("config_digest");
  doc["complete"] = plan.at("complete");
  doc["errors"] = plan.at("errors");

  std::string& md = rep.markdown;
  md += "# poisonlab report\n\n";
  md += "- tool version: " + plan.at("version").get<std::string>() + "\n";
  md += "- config digest: " + plan.at("config_digest").get<std::string>() + "\n";
  md += "- seed: " + std::to_string(plan.at("config").at("seed").get<std::uint64_t>()) + "\n";
  md += "- surrogate: " + plan.at("surrogate_name").get<std::string>() + "\n";
  md += std::string("- status: ") + (plan.at("complete").get<bool>() ? "complete" : "INCOMPLETE") + "\n";
  for (const auto& e : plan.at("errors"))
    md += "  - stage `" + e.at("stage").get<std::string>() + "` failed: " + e.at("message").get<std::string>() + "\n";

  // Accuracy, one block per dataset: rows are (target, template, shots, budget, rate),
  // columns are the strategies in report order.
  json acc = json::array();
  std::map<std::string, std::map<std::vector<std::string>, std::map<std::string, json>>> blocks;
  for (const auto& cell : plan.at("accuracy")) {
    json c = cell;
    c["result"] = load(cell.at("artifact").get<std::string>());
    acc.push_back(c);
  }
  doc["accuracy"] = acc;
  const auto& cfg = plan.at("config");
  for (const auto& ds : plan.at("datasets")) {
    const std::string dname = ds.get<std::string>();
    md += "\n## Accuracy (%), dataset " + dname + "\n\n";
    md += "| target | template | shots | k | rate | clean | random-label | synonym | character | suffix |\n";
    md += "|---|---|---|---|---|---|---|---|---|---|\n";
    auto find_cell = [&](const std::string& target, const std::string& tmpl, std::size_t shots, Strategy s,
                         std::size_t k, double rate) -> std::string {
      for (const auto& c : acc) {
        if (c.at("dataset") != dname || c.at("target") != target || c.at("template") != tmpl ||
            c.at("shots").get<std::size_t>() != shots || c.at("strategy") != std::string(to_string(s)))
          continue;
        if (s != Strategy::clean && (c.at("budget").get<std::size_t>() != k || c.at("rate").get<double>() != rate))
          continue;
        return detail::pct(c.at("result"));
      }
      return "-";
    };
    for (const auto& target : plan.at("target_names"))
      for (const auto& tmpl : cfg.at("templates"))
        for (const auto& shots : cfg.at("shots"))
          for (const auto& k : cfg.at("budgets"))
            for (const auto& rate : cfg.at("rates")) {
              const std::string tn = target.get<std::string>(), tp = tmpl.get<std::string>();
              const auto sh = shots.get<std::size_t>(), kk = k.get<std::size_t>();
              const double r = rate.get<double>();
              md += "| " + tn + " | " + tp + " | " + std::to_string(sh) + " | " + std::to_string(kk) + " | " +
                    rate_token(r) + " |";
              for (auto s : report_strategy_order()) {
                const std::size_t cell_k = (s == Strategy::clean || s == Strategy::random_label) ? 0 : kk;
                md += " " + find_cell(tn, tp, sh, s, cell_k, r) + " |";
              }
              md += "\n";
            }
  }

  // Model evaluations per poisoned example (deterministic cost; wall-clock is in timing.md).
  json cost = json::array();
  for (const auto& cell : plan.at("cost")) {
    json c = cell;
    c["result"] = load(cell.at("artifact").get<std::string>());
    cost.push_back(c);
  }
  doc["cost"] = cost;
  auto cost_table = [&](const std::string& title, const std::string& field, int digits) {
    std::string out = "\n## " + title + "\n\n| dataset | strategy |";
    for (const auto& k : cfg.at("budgets")) out += " k=" + std::to_string(k.get<std::size_t>()) + " |";
    out += "\n|---|---|";
    for (std::size_t i = 0; i < cfg.at("budgets").size(); ++i) out += "---|";
    out += "\n";
    for (const auto& ds : plan.at("datasets"))
      for (auto s : report_strategy_order()) {
        if (!is_perturbation(s)) continue;
        bool any = false;
        std::string row = "| " + ds.get<std::string>() + " | " + std::string(to_string(s)) + " |";
        for (const auto& k : cfg.at("budgets")) {
          std::string v = "-";
          for (const auto& c : cost)
            if (c.at("dataset") == ds && c.at("strategy") == std::string(to_string(s)) && c.at("budget") == k) {
              v = fixed(c.at("result").at(field).get<double>(), digits);
              any = true;
            }
          row += " " + v + " |";
        }
        if (any) out += row + "\n";
      }
    return out;
  };
  md += cost_table("Cost (mean model evaluations per example)", "mean_evaluations", 1);

  if (plan.contains("perplexity") && !plan.at("perplexity").empty()) {
    json ppl = json::array();
    for (const auto& cell : plan.at("perplexity")) {
      json c = cell;
      const json r = load(cell.at("artifact").get<std::string>());
      c["result"] = {{"mean", r.at("mean")}, {"stderr", r.at("stderr")}};
      ppl.push_back(c);
    }
    doc["perplexity"] = ppl;
    md += "\n## Perplexity score (mean NLL per token), scorer " + plan.at("scorer_name").get<std::string>() + "\n\n";
    md += "| dataset | k | clean | synonym | character | suffix |\n|---|---|---|---|---|---|\n";
    for (const auto& ds : plan.at("datasets"))
      for (const auto& k : cfg.at("budgets")) {
        md += "| " + ds.get<std::string>() + " | " + std::to_string(k.get<std::size_t>()) + " |";
        for (auto s : {Strategy::clean, Strategy::synonym, Strategy::character, Strategy::suffix}) {
          std::string v = "-";
          for (const auto& c : ppl)
            if (c.at("dataset") == ds && c.at("strategy") == std::string(to_string(s)) &&
                (s == Strategy::clean || c.at("budget") == k))
              v = detail::nll(c.at("result"));
          md += " " + v + " |";
        }
        md += "\n";
      }

    json filt = json::array();
    for (const auto& cell : plan.at("filter")) {
      json c = cell;
      c["result"] = load(cell.at("artifact").get<std::string>());
      filt.push_back(c);
    }
    doc["filter"] = filt;
    md += "\n## Perplexity filter (quantile " + fixed(cfg.at("defense").at("quantile").get<double>(), 2) + ")\n\n";
    md += "| dataset | strategy | k | rate | threshold | poisoned rejected | clean rejected |\n";
    md += "|---|---|---|---|---|---|---|\n";
    for (const auto& c : filt) {
      const auto& r = c.at("result");
      md += "| " + c.at("dataset").get<std::string>() + " | " + c.at("strategy").get<std::string>() + " | " +
            detail::budget_cell(c.at("budget").get<std::size_t>()) + " | " + rate_token(c.at("rate").get<double>()) +
            " | " + fixed(r.at("threshold").get<double>(), 3) + " | " +
            std::to_string(r.at("poisoned_rejected").get<std::size_t>()) + "/" +
            std::to_string(r.at("poisoned_total").get<std::size_t>()) + " | " +
            std::to_string(r.at("clean_rejected").get<std::size_t>()) + "/" +
            std::to_string(r.at("clean_total").get<std::size_t>()) + " |\n";
    }
  }

  // Wall-clock: kept out of report.json so the report stays byte-deterministic.
  json timing = json::array();
  for (const auto& t : plan.at("timing")) {
    const fs::path p = out_dir / t.at("path").get<std::string>();
    if (!fs::exists(p)) throw data_error("missing timing artifact " + t.at("path").get<std::string>());
    std::vector<double> ms;
    for (const auto& line : split_lines(read_file(p)))
      if (!line.empty()) ms.push_back(json::parse(line).at("time_ms").get<double>());
    json c = t;
    c["mean_ms"] = mean_stderr(ms).mean;
    timing.push_back(c);
  }
  rep.timing = {{"config_digest", plan.at("config_digest")}, {"timing", timing}};
  {
    std::string& tm = rep.timing_markdown;
    tm = "# poisonlab timing\n\nWall-clock per poisoned example; varies between machines and runs.\n";
    tm += "\n## Mean ms per example\n\n| dataset | strategy |";
    for (const auto& k : cfg.at("budgets")) tm += " k=" + std::to_string(k.get<std::size_t>()) + " |";
    tm += "\n|---|---|";
    for (std::size_t i = 0; i < cfg.at("budgets").size(); ++i) tm += "---|";
    tm += "\n";
    for (const auto& ds : plan.at("datasets"))
      for (auto s : report_strategy_order()) {
        if (!is_perturbation(s)) continue;
        bool any = false;
        std::string row = "| " + ds.get<std::string>() + " | " + std::string(to_string(s)) + " |";
        for (const auto& k : cfg.at("budgets")) {
          std::string v = "-";
          for (const auto& c : timing)
            if (c.at("dataset") == ds && c.at("strategy") == std::string(to_string(s)) && c.at("budget") == k) {
              v = fixed(c.at("mean_ms").get<double>(), 2);
              any = true;
            }
          row += " " + v + " |";
        }
        if (any) tm += row + "\n";
      }
  }
  return rep;
}

inline void write_report(const fs::path& out_dir, const Report& rep) {
  write_file(out_dir / "report.json", rep.document.dump(2) + "\n");
  write_file(out_dir / "report.md", rep.markdown);
  write_file(out_dir / "timing.json", rep.timing.dump(2) + "\n");
  write_file(out_dir / "timing.md", rep.timing_markdown);
}

// ---------------------------------------------------------------------------------------
// Pipeline

struct RunOptions {
  std::size_t jobs = 1;
  bool use_cache = true;
};

class ExperimentRunner {
 public:
  ExperimentRunner(ExperimentConfig cfg, RunOptions opts) : cfg_(std::move(cfg)), opts_(opts) {}

  Report run() {
    cfg_.validate();
    out_ = cfg_.out_dir();
    art_ = out_ / "artifacts";
    fs::remove_all(art_);
    fs::remove_all(out_ / "timing");

    surrogate_ = load_model(cfg_.resolve(cfg_.surrogate));
    surrogate_digest_ = model_digest(cfg_.resolve(cfg_.surrogate));
    for (const auto& t : cfg_.targets) targets_.push_back(load_model(cfg_.resolve(t)));
    std::set<std::string> names;
    for (const auto& t : targets_)
      if (!names.insert(t->name()).second) throw config_error("two targets share the model name '" + t->name() + "'");
    if (cfg_.uses(Strategy::synonym)) {
      embeddings_ = EmbeddingTable::load(cfg_.resolve(cfg_.embeddings));
      embeddings_digest_ = digest_of(read_file(cfg_.resolve(cfg_.embeddings)));
    }
    if (cfg_.defense) scorer_ = load_model(cfg_.resolve(cfg_.defense->scorer));

    std::vector<DatasetSpec> datasets = cfg_.datasets;
    std::sort(datasets.begin(), datasets.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    for (const auto& d : datasets) run_dataset(d);

    json dataset_names = json::array();
    for (const auto& d : datasets) dataset_names.push_back(d.name);
    json target_names = json::array();
    for (const auto& t : targets_) target_names.push_back(t->name());
    const json config = cfg_.to_json();
    json plan{{"tool", kToolName},
              {"version", POISONLAB_VERSION},
              {"config", config},
              {"config_digest", digest_of(config.dump())},
              {"complete", errors_.empty()},
              {"errors", errors_},
              {"datasets", dataset_names},
              {"surrogate_name", surrogate_->name()},
              {"target_names", target_names},
              {"scorer_name", scorer_ ? scorer_->name() : std::string()},
              {"accuracy", accuracy_},
              {"cost", cost_},
              {"perplexity", perplexity_},
              {"filter", filter_},
              {"timing", timing_}};
    const std::string plan_bytes = plan.dump(2) + "\n";
    write_file(art_ / "plan.json", plan_bytes);
    write_file(art_ / "manifest.json", json{{"artifacts", manifest_}, {"plan", digest_of(plan_bytes)}}.dump(2) + "\n");
    Report rep = emit_report(out_);
    write_report(out_, rep);
    return rep;
  }

 private:
  std::string put_artifact(const std::string& rel, const std::string& bytes) {
    write_file(art_ / rel, bytes);
    manifest_[rel] = digest_of(bytes);
    return rel;
  }

  void stage_error(const std::string& stage, const std::string& message) {
    errors_.push_back({{"stage", stage}, {"message", message}});
  }

  template <typename Fn>
  bool stage(const std::string& name, Fn&& fn) {
    try {
      fn();
      return true;
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::config) throw;
      stage_error(name, e.what());
    } catch (const json::exception& e) {
      stage_error(name, e.what());
    }
    return false;
  }

  /// Poisoned pool for one (strategy, budget), reused from the cache when its key and
  /// content digest both match.
  PoisonRun poison(const std::vector<LabeledText>& pool,
                   const std::vector<std::string>& labels, const AttackConfig& attack) {
    const auto tmpl = PromptTemplate::resolve(cfg_.probe_template());
    json key{{"version", POISONLAB_VERSION},
             {"surrogate", surrogate_digest_},
             {"pool", digest_of(emit_dataset(pool))},
             {"labels", labels},
             {"attack", attack.to_json()},
             {"template", tmpl.pattern()}};
    if (attack.strategy == Strategy::synonym) key["embeddings"] = embeddings_digest_;
    const std::string key_digest = digest_of(key.dump());
    const fs::path entry = cache_root(cfg_) / "poison" / key_digest;
    if (opts_.use_cache && fs::exists(entry / "digest.txt") && fs::exists(entry / "poisoned.jsonl") &&
        fs::exists(entry / "timing.jsonl")) {
      const std::string body = read_file(entry / "poisoned.jsonl");
      const std::string timing = read_file(entry / "timing.jsonl");
      if (read_file(entry / "digest.txt") == digest_of(body + timing) + "\n") return parse_poisoned_lines(body, timing);
    }
    AttackResources res;
    res.embeddings = embeddings_ ? &*embeddings_ : nullptr;
    res.label_space = labels;
    PoisonRun run = poison_dataset(surrogate_.get(), pool, attack, res, tmpl, opts_.jobs);
    if (opts_.use_cache) {
      const std::string body = poisoned_lines(run), timing = timing_lines(run);
      write_file(entry / "poisoned.jsonl", body);
      write_file(entry / "timing.jsonl", timing);
      write_file(entry / "key.json", key.dump(2) + "\n");
      write_file(entry / "digest.txt", digest_of(body + timing) + "\n");
    }
    return run;
  }

  EvalResult evaluate(const ModelBackend& target, const PromptSet& pool, const std::vector<LabeledText>& test,
                      const EvalConfig& ec) {
    const std::string digest = eval_config_digest(target, pool, test, ec);
    if (auto it = eval_memo_.find(digest); it != eval_memo_.end()) return it->second;
    EvalResult r = evaluate_icl(target, pool, test, ec, opts_.jobs);
    if (target.name() != surrogate_->name()) r.surrogate = surrogate_->name();
    eval_memo_.emplace(digest, r);
    return r;
  }

  void run_dataset(const DatasetSpec& spec) {
    Dataset train, test;
    if (!stage("ingest " + spec.name, [&] {
          train = ingest_dataset(cfg_.resolve(spec.train));
          test = ingest_dataset(cfg_.resolve(spec.test));
        }))
      return;
    const std::vector<std::string> labels = label_space_of(train.records, test.records);
    const std::string dname = path_token(spec.name);
    const std::uint64_t dseed = derive_seed(cfg_.seed, fnv1a(spec.name));
    const std::uint64_t poison_seed = derive_seed(dseed, 1), mix_seed = derive_seed(dseed, 2),
                        eval_seed = derive_seed(dseed, 3);
    const PromptSet clean = PromptSet::clean(train.records);

    struct Variant {
      Strategy strategy;
      std::size_t budget;
      PromptSet poisoned;
    };
    std::vector<Variant> variants;
    for (auto s : report_strategy_order()) {
      if (!cfg_.uses(s)) continue;
      const std::vector<std::size_t> budgets = is_perturbation(s) ? cfg_.budgets : std::vector<std::size_t>{0};
      for (auto k : budgets) {
        AttackConfig attack;
        attack.strategy = s;
        attack.budget = std::max<std::size_t>(k, 1);
        attack.synonym_m = cfg_.synonym_m;
        attack.allow_noop_candidate = cfg_.allow_noop_candidate;
        attack.seed = poison_seed;
        const std::string name = cell_name(s, k);
        stage("poison " + spec.name + " " + name, [&] {
          PoisonRun run = poison(train.records, labels, attack);
          const std::string rel = "poison/" + dname + "/" + name;
          put_artifact(rel + ".jsonl", poisoned_lines(run));
          std::uint64_t evals = 0;
          std::size_t failures = 0;
          for (const auto& e : run.examples) {
            evals += e.evaluations;
            failures += e.failure.empty() ? 0 : 1;
          }
          const json cost{{"examples", run.examples.size()},
                          {"total_evaluations", evals},
                          {"mean_evaluations", static_cast<double>(evals) / static_cast<double>(run.examples.size())},
                          {"failures", failures}};
          if (is_perturbation(s))
            cost_.push_back({{"dataset", spec.name},
                             {"strategy", std::string(to_string(s))},
                             {"budget", k},
                             {"artifact", put_artifact(rel + ".cost.json", cost.dump(2) + "\n")}});
          const std::string timing_rel = "timing/" + dname + "/" + name + ".jsonl";
          write_file(out_ / timing_rel, timing_lines(run));
          if (is_perturbation(s))
            timing_.push_back({{"dataset", spec.name}, {"strategy", std::string(to_string(s))}, {"budget", k},
                               {"path", timing_rel}});
          variants.push_back({s, k, PromptSet::clean(poisoned_items(run))});
        });
      }
    }

    for (std::size_t ti = 0; ti < targets_.size(); ++ti) {
      const ModelBackend& target = *targets_[ti];
      for (const auto& tspec : cfg_.templates) {
        const auto tmpl = PromptTemplate::resolve(tspec);
        for (auto shots : cfg_.shots) {
          EvalConfig ec;
          ec.shots = shots;
          ec.runs = cfg_.runs;
          ec.seed = eval_seed;
          ec.tmpl = tmpl;
          ec.labels = labels;
          const std::string dir = "eval/" + dname + "/" + path_token(target.name()) + "/" + path_token(tmpl.name()) +
                                  "/s" + std::to_string(shots) + "/";
          auto record = [&](Strategy s, std::size_t k, double rate, const EvalResult& r, const std::string& name) {
            accuracy_.push_back({{"dataset", spec.name},
                                 {"target", target.name()},
                                 {"template", tspec},
                                 {"shots", shots},
                                 {"strategy", std::string(to_string(s))},
                                 {"budget", k},
                                 {"rate", rate},
                                 {"artifact", put_artifact(dir + name + ".json", r.serialize())}});
          };
          stage("eval " + spec.name + " " + target.name() + " " + tspec + " clean",
                [&] { record(Strategy::clean, 0, 0.0, evaluate(target, clean, test.records, ec), "clean"); });
          for (const auto& v : variants)
            for (double rate : cfg_.rates) {
              const std::string name = cell_name(v.strategy, v.budget, rate);
              stage("eval " + spec.name + " " + target.name() + " " + tspec + " " + name, [&] {
                const PromptSet mixed = mix_poison(clean, v.poisoned, rate, mix_seed);
                if (ti == 0 && tspec == cfg_.templates.front() && shots == cfg_.shots.front())
                  put_artifact("pools/" + dname + "/" + name + ".jsonl", mixed.serialize());
                record(v.strategy, v.budget, rate, evaluate(target, mixed, test.records, ec), name);
              });
            }
        }
      }
    }

    if (!scorer_) return;
    const ModelBackend& scorer = *scorer_;
    stage("perplexity " + spec.name + " clean", [&] {
      const auto rep = perplexity_report(scorer, clean.items, opts_.jobs);
      perplexity_.push_back(
          {{"dataset", spec.name}, {"strategy", "clean"}, {"budget", 0},
           {"artifact", put_artifact("defense/" + dname + "/perplexity-clean.json", rep.to_json().dump(2) + "\n")}});
    });
    for (const auto& v : variants) {
      if (!is_perturbation(v.strategy)) continue;
      const std::string name = cell_name(v.strategy, v.budget);
      stage("perplexity " + spec.name + " " + name, [&] {
        const auto rep = perplexity_report(scorer, v.poisoned.items, opts_.jobs);
        perplexity_.push_back({{"dataset", spec.name},
                               {"strategy", std::string(to_string(v.strategy))},
                               {"budget", v.budget},
                               {"artifact", put_artifact("defense/" + dname + "/perplexity-" + name + ".json",
                                                         rep.to_json().dump(2) + "\n")}});
      });
      for (double rate : cfg_.rates) {
        if (rate == 0.0) continue;
        const std::string cell = cell_name(v.strategy, v.budget, rate);
        stage("filter " + spec.name + " " + cell, [&] {
          const PromptSet mixed = mix_poison(clean, v.poisoned, rate, mix_seed);
          const auto res = perplexity_filter(mixed, scorer, cfg_.defense->quantile, opts_.jobs);
          std::size_t p_rej = 0, c_rej = 0;
          for (const auto& r : res.rejected) (mixed.provenance[r.index] == Provenance::poisoned ? p_rej : c_rej)++;
          const json summary{{"threshold", res.threshold},
                             {"rejected", res.rejected.size()},
                             {"poisoned_total", mixed.poisoned_count()},
                             {"poisoned_rejected", p_rej},
                             {"clean_total", mixed.size() - mixed.poisoned_count()},
                             {"clean_rejected", c_rej}};
          put_artifact("defense/" + dname + "/rejections-" + cell + ".jsonl", res.rejection_lines());
          filter_.push_back({{"dataset", spec.name},
                             {"strategy", std::string(to_string(v.strategy))},
                             {"budget", v.budget},
                             {"rate", rate},
                             {"artifact", put_artifact("defense/" + dname + "/filter-" + cell + ".json",
                                                       summary.dump(2) + "\n")}});
        });
      }
    }
  }

  ExperimentConfig cfg_;
  RunOptions opts_;
  fs::path out_, art_;
  std::unique_ptr<ModelBackend> surrogate_;
  std::string surrogate_digest_;
  std::vector<std::unique_ptr<ModelBackend>> targets_;
  std::optional<EmbeddingTable> embeddings_;
  std::string embeddings_digest_;
  std::unique_ptr<ModelBackend> scorer_;
  std::map<std::string, EvalResult> eval_memo_;
  json manifest_ = json::object();
  json errors_ = json::array();
  json accuracy_ = json::array(), cost_ = json::array(), perplexity_ = json::array(), filter_ = json::array(),
       timing_ = json::array();
};

inline Report run_experiment(const ExperimentConfig& cfg, RunOptions opts = {}) {
  return ExperimentRunner(cfg, opts).run();
}

}  // namespace poisonlab
