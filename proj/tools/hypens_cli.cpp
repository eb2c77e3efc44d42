#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "hypens/pipeline.hpp"

namespace {

struct Flags {
  std::optional<std::string> config;
  std::optional<std::string> method;
  std::optional<std::string> utility;
  std::vector<std::string> scorers;
  std::optional<std::string> backend;
  std::optional<int> n;
  std::optional<double> temperature;
  std::optional<double> top_p;
  std::optional<std::uint64_t> seed;
  std::optional<double> gate_bleu;
  std::optional<double> hall_bleu;
  std::optional<std::size_t> parallelism;
  std::vector<std::string> in;
  std::string out;

  std::optional<std::string> mode;
  std::optional<std::string> template_id;
  std::optional<std::string> shots;
  std::optional<int> max_tokens;
  std::optional<std::string> gate_scope;
  std::optional<std::size_t> pseudo_refs;
  bool exclude_self = false;

  std::string sources;
  std::optional<std::string> dump_matrices;
  std::string kind = "misspell";
  std::optional<std::string> tokens;
  std::vector<double> temps{0.2, 0.4, 0.6, 0.8, 1.0};
  std::string perturbed;
  std::string refs;
  std::string expected_lang;
  std::string baseline;
};

void add_common(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
  app->add_option("--utility", f.utility, "utility endpoint (chrf, bleu, stub:..., exec:..., tcp://...)");
  app->add_option("--scorer", f.scorers, "ROLE=ENDPOINT with ROLE in utility, qe, oracle, langid");
  app->add_option("--backend", f.backend, "completion backend (stub:noisy, stub:echo, http://...)");
  app->add_option("--n", f.n, "hypotheses per segment");
  app->add_option("--temperature", f.temperature);
  app->add_option("--top-p", f.top_p);
  app->add_option("--seed", f.seed);
  app->add_option("--gate-bleu", f.gate_bleu);
  app->add_option("--hall-bleu", f.hall_bleu);
  app->add_option("--parallelism", f.parallelism)->check(CLI::PositiveNumber);
  app->add_option("--out", f.out, "output path")->required();
}

hypens::RunConfig build_config(const Flags& f) {
  hypens::RunConfig c;
  if (f.config) c = hypens::RunConfig::load(*f.config);
  if (f.mode) {
    const auto mode = hypens::parse_sampling_mode(*f.mode);
    const int n = f.n.value_or(c.sampling.n);
    const int max_tokens = c.sampling.max_tokens;
    if (mode == hypens::SamplingMode::greedy) c.sampling = hypens::SamplingConfig::greedy();
    if (mode == hypens::SamplingMode::unbiased) c.sampling = hypens::SamplingConfig::unbiased(n);
    if (mode == hypens::SamplingMode::biased) c.sampling = hypens::SamplingConfig::biased(n);
    c.sampling.mode = mode;
    c.sampling.max_tokens = max_tokens;
  }
  if (f.n) c.sampling.n = *f.n;
  if (f.temperature) c.sampling.temperature = *f.temperature;
  if (f.top_p) c.sampling.top_p = *f.top_p;
  if (f.max_tokens) c.sampling.max_tokens = *f.max_tokens;
  if (f.method) c.method = *f.method;
  if (f.backend) c.backend = *f.backend;
  if (f.utility) c.scorers["utility"] = *f.utility;
  for (const auto& s : f.scorers) {
    const auto eq = s.find('=');
    const std::string role = eq == std::string::npos ? "" : s.substr(0, eq);
    if (role != "utility" && role != "qe" && role != "oracle" && role != "langid")
      throw hypens::Error("--scorer expects ROLE=ENDPOINT with ROLE in utility, qe, oracle, langid; got '" +
                          s + "'");
    c.scorers[role] = s.substr(eq + 1);
  }
  if (f.seed) c.seed = *f.seed;
  if (f.gate_bleu) c.gate_bleu = *f.gate_bleu;
  if (f.hall_bleu) c.hall_bleu = *f.hall_bleu;
  if (f.parallelism) c.parallelism = *f.parallelism;
  if (f.template_id) c.template_id = *f.template_id;
  if (f.shots) c.shots_path = *f.shots;
  if (f.gate_scope) c.gate_scope = *f.gate_scope;
  if (f.pseudo_refs) c.pseudo_references = *f.pseudo_refs;
  if (f.exclude_self) c.include_self = false;
  c.validate();
  return c;
}

const std::string& single_input(const Flags& f) {
  if (f.in.size() != 1) throw hypens::Error("expected exactly one --in");
  return f.in.front();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hypothesis ensembling for LLM-based machine translation"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("generate", "sample hypothesis sets for source segments");
  add_common(gen, f);
  gen->add_option("--in", f.in, "source segments (JSONL)")->required();
  gen->add_option("--mode", f.mode, "greedy | unbiased | biased | custom");
  gen->add_option("--template", f.template_id, "prompt template id");
  gen->add_option("--shots", f.shots, "few-shot examples (JSONL with source, translation)");
  gen->add_option("--max-tokens", f.max_tokens);

  auto* ens = app.add_subcommand("ensemble", "select one output per hypothesis set");
  add_common(ens, f);
  ens->add_option("--in", f.in, "hypothesis sets (JSONL)")->required();
  ens->add_option("--sources", f.sources, "source segments (JSONL)")->required();
  ens->add_option("--method", f.method, "greedy | sample | mbr | rank | oracle | choose_best | generate_best");
  ens->add_option("--dump-matrices", f.dump_matrices, "write MBR utility matrices (JSONL)");
  ens->add_option("--pseudo-refs", f.pseudo_refs, "use the first M hypotheses as pseudo-references");
  ens->add_flag("--exclude-self", f.exclude_self, "drop the self-utility term from MBR");

  auto* div = app.add_subcommand("diversity", "per-segment hypothesis diversity");
  add_common(div, f);
  div->add_option("--in", f.in, "hypothesis sets (JSONL)")->required();
  div->add_option("--sources", f.sources, "source segments (JSONL)")->required();

  auto* per = app.add_subcommand("perturb", "perturb source segments");
  add_common(per, f);
  per->add_option("--in", f.in, "source segments (JSONL)")->required();
  per->add_option("--kind", f.kind, "misspell | titlecase | insert");
  per->add_option("--tokens", f.tokens, "frequent-token list, one per line");

  auto* sweep = app.add_subcommand("sweep-temperature", "diversity and quality across temperatures");
  add_common(sweep, f);
  sweep->add_option("--in", f.in, "source segments with references (JSONL)")->required();
  sweep->add_option("--temps", f.temps, "temperatures")->delimiter(',');

  auto* hall = app.add_subcommand("hallucination-report", "hallucination rate under perturbation");
  add_common(hall, f);
  hall->add_option("--in", f.in, "selections on unperturbed sources (JSONL)")->required();
  hall->add_option("--perturbed", f.perturbed, "selections on perturbed sources (JSONL)")->required();
  hall->add_option("--refs", f.refs, "source segments with references (JSONL)")->required();
  hall->add_option("--gate-scope", f.gate_scope, "all | each");

  auto* lang = app.add_subcommand("langid-report", "wrong-target-language rate per method");
  add_common(lang, f);
  lang->add_option("--in", f.in, "selections (JSONL)")->required();
  lang->add_option("--expected-lang", f.expected_lang, "expected language code")->required();

  auto* cost = app.add_subcommand("cost-report", "token cost relative to a baseline ledger");
  add_common(cost, f);
  cost->add_option("--in", f.in, "cost ledgers (JSONL)")->required();
  cost->add_option("--baseline", f.baseline, "baseline ledger (JSONL)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    const hypens::RunConfig cfg = build_config(f);
    if (gen->parsed()) {
      hypens::run_generate(cfg, single_input(f), f.out);
    } else if (ens->parsed()) {
      std::optional<std::filesystem::path> dump;
      if (f.dump_matrices) dump = *f.dump_matrices;
      hypens::run_ensemble(cfg, single_input(f), f.sources, f.out, hypens::parse_method(cfg.method), dump);
    } else if (div->parsed()) {
      hypens::run_diversity(cfg, single_input(f), f.sources, f.out);
    } else if (per->parsed()) {
      std::optional<std::filesystem::path> tokens;
      if (f.tokens) tokens = *f.tokens;
      hypens::run_perturb(cfg, single_input(f), f.out, hypens::parse_perturbation_kind(f.kind), tokens);
    } else if (sweep->parsed()) {
      hypens::run_sweep_temperature(cfg, single_input(f), f.temps, f.out);
    } else if (hall->parsed()) {
      hypens::run_hallucination_report(cfg, single_input(f), f.perturbed, f.refs, f.out);
    } else if (lang->parsed()) {
      hypens::run_langid_report(cfg, single_input(f), f.expected_lang, f.out);
    } else if (cost->parsed()) {
      std::vector<std::filesystem::path> ledgers(f.in.begin(), f.in.end());
      hypens::run_cost_report(cfg, ledgers, f.baseline, f.out);
    }
  } catch (const hypens::ParseError& e) {
    std::cerr << "hypens: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "hypens: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
