#include <functional>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "poisonlab/attacks.hpp"
#include "poisonlab/dataset.hpp"
#include "poisonlab/defense.hpp"
#include "poisonlab/experiment.hpp"
#include "poisonlab/fixtures.hpp"
#include "poisonlab/harness.hpp"
#include "poisonlab/model_io.hpp"

namespace {

using namespace poisonlab;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::runtime: return 4;
  }
  return 4;
}

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t jobs = 1;

  std::optional<ExperimentConfig> experiment() const {
    if (config.empty()) return std::nullopt;
    return ExperimentConfig::load(config);
  }
};

// Value given on the command line, else the experiment config's, else an error.
std::string pick(const std::string& flag, const std::string& value, const std::optional<ExperimentConfig>& cfg,
                 const std::function<std::string(const ExperimentConfig&)>& from_cfg) {
  if (!value.empty()) return value;
  if (cfg) {
    const std::string v = from_cfg(*cfg);
    if (!v.empty()) return cfg->resolve(v).string();
  }
  throw config_error(flag + " is required (or provide it through --config)");
}

std::vector<LabeledText> read_pool(const std::string& path) { return ingest_dataset(path).records; }

PromptSet read_prompt_set(const std::string& path) { return ingest_dataset(path).as_prompt_set(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"poisonlab: hidden-state distortion poisoning of in-context demonstrations"};
  app.set_version_flag("--version", std::string(POISONLAB_VERSION));
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON)");
  app.add_option("--seed", g.seed, "master seed, overrides the config");
  app.add_option("--out", g.out, "output file or directory");
  app.add_option("--jobs", g.jobs, "worker threads")->check(CLI::PositiveNumber);

  // poison
  auto* poison = app.add_subcommand("poison", "poison every example of a pool against a surrogate model");
  std::string p_model, p_data, p_strategy = "synonym", p_embeddings, p_template;
  std::size_t p_budget = 0, p_m = 0;
  bool p_noop = false;
  poison->add_option("--model", p_model, "surrogate model directory or manifest");
  poison->add_option("--data", p_data, "pool to poison (JSONL)");
  poison->add_option("--strategy", p_strategy, "random-label | synonym | character | suffix");
  poison->add_option("--budget,-k", p_budget, "perturbation budget k (default 5)");
  poison->add_option("--synonym-m", p_m, "synonyms considered per word (default 10)");
  poison->add_option("--embeddings", p_embeddings, "word embedding table");
  poison->add_option("--template", p_template, "probe template: F1, F2, F3 or a pattern");
  poison->add_flag("--allow-noop", p_noop, "let a greedy step keep the current unit");

  // mix
  auto* mix = app.add_subcommand("mix", "replace a fraction of a clean pool by its poisoned counterpart");
  std::string m_clean, m_poisoned;
  double m_rate = 1.0;
  mix->add_option("--clean", m_clean, "clean pool")->required();
  mix->add_option("--poisoned", m_poisoned, "poisoned pool, aligned with the clean one")->required();
  mix->add_option("--rate", m_rate, "poisoning rate in [0, 1]");

  // eval
  auto* eval = app.add_subcommand("eval", "measure in-context accuracy");
  std::string e_model, e_pool, e_test, e_template = "F1", e_surrogate;
  std::size_t e_shots = 5, e_runs = 5;
  eval->add_option("--model", e_model, "target model");
  eval->add_option("--pool", e_pool, "demonstration pool");
  eval->add_option("--test", e_test, "test set");
  eval->add_option("--shots", e_shots, "demonstrations per prompt");
  eval->add_option("--runs", e_runs, "independent runs");
  eval->add_option("--template", e_template, "prompt template");
  eval->add_option("--surrogate-name", e_surrogate, "tag the result as a transfer from this surrogate");

  // defend
  auto* defend = app.add_subcommand("defend", "perplexity scoring, filtering and paraphrasing of a pool");
  std::string d_scorer, d_pool, d_paraphrase = "identity";
  double d_quantile = 0.95;
  defend->add_option("--scorer", d_scorer, "scoring model")->required();
  defend->add_option("--pool", d_pool, "pool to screen")->required();
  defend->add_option("--quantile", d_quantile, "rejection threshold quantile in (0, 1]");
  defend->add_option("--paraphrase", d_paraphrase, "identity | strip-after-sentence-end");

  auto* report = app.add_subcommand("report", "rebuild report.json and report.md from stored artifacts");

  auto* run = app.add_subcommand("run", "full pipeline from an experiment config");
  bool r_no_cache = false;
  run->add_flag("--no-cache", r_no_cache, "ignore and do not write the poisoning cache");

  auto* fixtures_cmd = app.add_subcommand("fixtures", "write the bundled fixture models, datasets and config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const auto cfg = g.experiment();
    const std::uint64_t seed = g.seed.value_or(cfg ? cfg->seed : 0);

    if (*poison) {
      const std::string model_path = pick("--model", p_model, cfg, [](const auto& c) { return c.surrogate; });
      const std::string data_path = pick("--data", p_data, cfg, [](const auto& c) { return c.datasets.front().train; });
      AttackConfig attack;
      attack.strategy = parse_strategy(p_strategy);
      if (!is_perturbation(attack.strategy) && attack.strategy != Strategy::random_label)
        throw config_error("poison needs a non-clean strategy");
      attack.budget = p_budget ? p_budget : (cfg ? cfg->budgets.front() : 5);
      attack.synonym_m = p_m ? p_m : (cfg ? cfg->synonym_m : 10);
      attack.allow_noop_candidate = p_noop || (cfg && cfg->allow_noop_candidate);
      attack.seed = seed;
      const auto tmpl = PromptTemplate::resolve(!p_template.empty() ? p_template : cfg ? cfg->probe_template() : "F1");
      const auto model = load_model(model_path);
      const Dataset pool = ingest_dataset(data_path);
      std::optional<EmbeddingTable> table;
      AttackResources res;
      res.label_space = pool.label_space;
      if (attack.strategy == Strategy::synonym) {
        table = EmbeddingTable::load(pick("--embeddings", p_embeddings, cfg, [](const auto& c) { return c.embeddings; }));
        res.embeddings = &*table;
      }
      const PoisonRun result = poison_dataset(model.get(), pool.records, attack, res, tmpl, g.jobs);
      const std::string out = g.out.empty() ? "poisoned.jsonl" : g.out;
      write_file(out, poisoned_lines(result));
      write_file(out + ".timing.jsonl", timing_lines(result));
      std::size_t failures = 0;
      for (const auto& e : result.examples) failures += e.failure.empty() ? 0 : 1;
      std::cout << "poisoned " << result.examples.size() << " examples (" << failures << " passed through) -> " << out
                << "\n";
      return 0;
    }

    if (*mix) {
      const PromptSet clean = read_prompt_set(m_clean);
      const PromptSet poisoned = PromptSet::clean(read_pool(m_poisoned));
      const PromptSet mixed = mix_poison(clean, poisoned, m_rate, seed);
      const std::string out = g.out.empty() ? "mixed.jsonl" : g.out;
      write_file(out, mixed.serialize());
      std::cout << mixed.poisoned_count() << " of " << mixed.size() << " examples poisoned -> " << out << "\n";
      return 0;
    }

    if (*eval) {
      const auto model = load_model(pick("--model", e_model, cfg, [](const auto& c) { return c.targets.front(); }));
      const PromptSet pool =
          read_prompt_set(pick("--pool", e_pool, cfg, [](const auto& c) { return c.datasets.front().train; }));
      const auto test = read_pool(pick("--test", e_test, cfg, [](const auto& c) { return c.datasets.front().test; }));
      EvalConfig ec;
      ec.shots = e_shots;
      ec.runs = e_runs;
      ec.seed = seed;
      ec.tmpl = PromptTemplate::resolve(e_template);
      ec.labels = label_space_of(pool.items, test);
      const EvalResult r = e_surrogate.empty() ? evaluate_icl(*model, pool, test, ec, g.jobs)
                                               : transfer_eval(pool, e_surrogate, *model, test, ec, g.jobs);
      if (!g.out.empty()) write_file(g.out, r.serialize());
      std::cout << r.serialize();
      return 0;
    }

    if (*defend) {
      const auto scorer = load_model(d_scorer);
      const PromptSet pool = apply_paraphrase(read_prompt_set(d_pool), paraphraser_by_name(d_paraphrase));
      const auto result = perplexity_filter(pool, *scorer, d_quantile, g.jobs);
      const fs::path out = g.out.empty() ? fs::path("defense") : fs::path(g.out);
      PerplexityReport ppl;
      ppl.scores = result.scores;
      const auto ms = mean_stderr(ppl.scores);
      ppl.mean = ms.mean;
      ppl.stderr_ = ms.stderr_;
      write_file(out / "perplexity.json", ppl.to_json().dump(2) + "\n");
      write_file(out / "rejections.jsonl", result.rejection_lines());
      write_file(out / "filtered.jsonl", result.kept.serialize());
      std::cout << "mean NLL " << fixed(ppl.mean, 4) << ", threshold " << fixed(result.threshold, 4) << ", rejected "
                << result.rejected.size() << " of " << pool.size() << " -> " << out.string() << "\n";
      return 0;
    }

    if (*report) {
      const fs::path out = !g.out.empty() ? fs::path(g.out) : cfg ? cfg->out_dir() : fs::path("out");
      const Report rep = emit_report(out);
      write_report(out, rep);
      std::cout << rep.markdown;
      return rep.complete() ? 0 : 4;
    }

    if (*run) {
      if (!cfg) throw config_error("run needs --config");
      ExperimentConfig c = *cfg;
      if (g.seed) c.seed = *g.seed;
      if (!g.out.empty()) c.out = fs::absolute(g.out).string();
      const Report rep = run_experiment(c, RunOptions{g.jobs, !r_no_cache});
      std::cout << rep.markdown;
      if (!rep.complete()) {
        std::cerr << "poisonlab: some stages failed; the report is marked incomplete\n";
        return 4;
      }
      return 0;
    }

    if (*fixtures_cmd) {
      const fs::path out = g.out.empty() ? fs::path("fixtures") : fs::path(g.out);
      fixtures::write_all(out, seed);
      std::cout << "fixtures written to " << out.string() << "\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "poisonlab: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "poisonlab: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "poisonlab: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
