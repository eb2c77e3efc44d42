#pragma once

// Batch orchestration behind the `hypens` command-line tool. Each run_*
// function is one subcommand; it throws on any error and never leaves a
// partial file at an output path.

#include <algorithm>
#include <atomic>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "backends.hpp"
#include "core.hpp"
#include "ensemble.hpp"
#include "genkit.hpp"
#include "metrics.hpp"
#include "mixer.hpp"
#include "robustness.hpp"
#include "scorer.hpp"

namespace hypens {

struct RunConfig {
  std::string backend = "stub:noisy";
  /// Endpoints by role: utility, qe, oracle, langid.
  std::map<std::string, std::string> scorers{{"utility", "chrf"}, {"oracle", "chrf"}};
  SamplingConfig sampling = SamplingConfig::unbiased(5);
  std::string template_id = "hendy";
  std::string method = "mbr";
  std::size_t parallelism = 1;
  std::uint64_t seed = 0;
  double gate_bleu = default_gate_bleu;
  double hall_bleu = default_hallucination_bleu;
  std::string gate_scope = "all";  // "all" methods must pass the gate, or "each"
  bool include_self = true;
  std::optional<std::size_t> pseudo_references;
  std::optional<std::string> shots_path;
  double stub_noise = 0.35;

  json to_json() const {
    json j;
    j["backend"] = backend;
    j["scorers"] = scorers;
    j["sampling"] = {{"temperature", sampling.temperature},
                     {"top_p", sampling.top_p},
                     {"n", sampling.n},
                     {"max_tokens", sampling.max_tokens},
                     {"mode", std::string(to_string(sampling.mode))}};
    j["template"] = template_id;
    j["method"] = method;
    j["parallelism"] = parallelism;
    j["seed"] = seed;
    j["gate_bleu"] = gate_bleu;
    j["hall_bleu"] = hall_bleu;
    j["gate_scope"] = gate_scope;
    j["include_self"] = include_self;
    j["pseudo_references"] = pseudo_references ? json(*pseudo_references) : json(nullptr);
    j["shots"] = shots_path ? json(*shots_path) : json(nullptr);
    j["stub_noise"] = stub_noise;
    return j;
  }

  /// Applies keys present in `j`; unknown keys are rejected.
  void merge(const json& j) {
    static const std::set<std::string> known{
        "backend",   "scorers",     "sampling",     "template",          "method",
        "parallelism", "seed",      "gate_bleu",    "hall_bleu",         "gate_scope",
        "include_self", "pseudo_references", "shots", "stub_noise"};
    if (!j.is_object()) throw Error("config must be a JSON object");
    for (const auto& [k, v] : j.items())
      if (!known.contains(k)) throw Error("unknown config key '" + k + "'");
    if (j.contains("backend")) backend = j["backend"].get<std::string>();
    if (j.contains("scorers"))
      for (const auto& [k, v] : j["scorers"].items()) scorers[k] = v.get<std::string>();
    if (j.contains("sampling")) {
      const auto& s = j["sampling"];
      if (s.contains("mode")) {
        auto mode = parse_sampling_mode(s["mode"].get<std::string>());
        const int n = s.value("n", sampling.n);
        if (mode == SamplingMode::greedy) sampling = SamplingConfig::greedy();
        if (mode == SamplingMode::unbiased) sampling = SamplingConfig::unbiased(n);
        if (mode == SamplingMode::biased) sampling = SamplingConfig::biased(n);
        sampling.mode = mode;
      }
      sampling.temperature = s.value("temperature", sampling.temperature);
      sampling.top_p = s.value("top_p", sampling.top_p);
      sampling.n = s.value("n", sampling.n);
      sampling.max_tokens = s.value("max_tokens", sampling.max_tokens);
    }
    template_id = j.value("template", template_id);
    method = j.value("method", method);
    parallelism = j.value("parallelism", parallelism);
    seed = j.value("seed", seed);
    gate_bleu = j.value("gate_bleu", gate_bleu);
    hall_bleu = j.value("hall_bleu", hall_bleu);
    gate_scope = j.value("gate_scope", gate_scope);
    include_self = j.value("include_self", include_self);
    if (j.contains("pseudo_references") && !j["pseudo_references"].is_null())
      pseudo_references = j["pseudo_references"].get<std::size_t>();
    if (j.contains("shots") && !j["shots"].is_null()) shots_path = j["shots"].get<std::string>();
    stub_noise = j.value("stub_noise", stub_noise);
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    RunConfig c;
    try {
      c.merge(json::parse(in));
    } catch (const json::exception& e) {
      throw Error("config " + path.string() + ": " + e.what());
    }
    return c;
  }

  /// 16 hex digits of FNV-1a over the canonical (key-sorted) JSON form.
  /// Parallelism does not change results and is left out.
  std::string hash() const {
    json j = to_json();
    j.erase("parallelism");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, fnv1a64(j.dump()));
    return buf;
  }

  RunStamp stamp() const { return {hash(), seed}; }

  void validate() const {
    sampling.validate();
    parse_template_id(template_id);
    if (gate_scope != "all" && gate_scope != "each") throw Error("gate_scope must be 'all' or 'each'");
    if (parallelism < 1) throw Error("parallelism must be >= 1");
  }

  std::optional<std::string> scorer(const std::string& role) const {
    auto it = scorers.find(role);
    if (it == scorers.end() || it->second.empty()) return std::nullopt;
    return it->second;
  }
};

// ---------------------------------------------------------------------------
// Endpoint resolution

/// A utility backed either by an in-process function or a scorer handle.
class ResolvedScorer {
 public:
  explicit ResolvedScorer(UtilityFunction fn) : fn_(std::move(fn)) {}
  explicit ResolvedScorer(std::shared_ptr<ScorerHandle> h) : handle_(std::move(h)) {}

  std::string name() const { return fn_ ? fn_->name() : handle_->name(); }
  bool needs_reference() const { return fn_ ? fn_->needs_reference() : handle_->needs_reference(); }
  ScorerHandle* handle() const { return handle_.get(); }
  const UtilityFunction* function() const { return fn_ ? &*fn_ : nullptr; }

  UtilityMatrix matrix(std::string_view source, const HypothesisSet& hyps, std::size_t parallelism) const {
    if (fn_) return compute_utility_matrix(source, hyps, *fn_, {parallelism});
    return compute_utility_matrix(source, hyps, *handle_);
  }

  double score(std::string_view source, std::string_view mt, std::string_view ref) const {
    if (fn_) return (*fn_)(source, mt, ref);
    return handle_->score(source, mt, ref);
  }

 private:
  std::optional<UtilityFunction> fn_;
  std::shared_ptr<ScorerHandle> handle_;
};

/// In-process scorer/1 service answering from a JSONL table of
/// {"src","mt","score"} rows. Reference-free; unknown pairs are an error.
inline std::shared_ptr<StubScorerService> make_table_stub(const std::filesystem::path& path) {
  auto table = std::make_shared<std::map<std::pair<std::string, std::string>, double>>();
  detail::for_each_jsonl(path, [&](std::size_t, const json& obj) {
    (*table)[{detail::require_string(obj, "src"), detail::require_string(obj, "mt")}] =
        detail::require_number(obj, "score");
  });
  StubScorerService::Options o;
  o.name = "table";
  o.needs_reference = false;
  return std::make_shared<StubScorerService>(
      o, [table](const std::string& src, const std::string& mt, const std::optional<std::string>&) {
        auto it = table->find({src, mt});
        if (it == table->end()) throw Error("score table has no entry for this (src, mt) pair");
        return it->second;
      });
}

/// "chrf" | "bleu"          in-process utility
/// "stub:chrf" | "stub:bleu" the same utility behind the scorer/1 wire path
/// "stub:table:<path>"       precomputed reference-free scores
/// "exec:<cmd>" | "tcp://host:port"  external scorer/1 endpoint
inline ResolvedScorer resolve_scorer(const std::string& endpoint) {
  if (endpoint == "chrf" || endpoint == "bleu") return ResolvedScorer(builtin_utility(endpoint));
  if (endpoint.starts_with("stub:")) {
    std::string_view what = std::string_view(endpoint).substr(5);
    std::shared_ptr<LineService> svc;
    if (what == "chrf" || what == "bleu")
      svc = make_utility_stub(builtin_utility(what));
    else if (what.starts_with("table:"))
      svc = make_table_stub(std::string(what.substr(6)));
    else
      throw Error("unknown stub scorer '" + endpoint + "'");
    return ResolvedScorer(std::shared_ptr<ScorerHandle>(
        ScorerHandle::connect(std::make_unique<LoopbackChannel>(std::move(svc)))));
  }
  return ResolvedScorer(std::shared_ptr<ScorerHandle>(ScorerHandle::connect(open_channel(endpoint))));
}

/// "stub:script:<latin-code>,<cyrillic-code>" or an external langid/1 endpoint.
inline std::unique_ptr<LangIdHandle> resolve_langid(const std::string& endpoint) {
  constexpr std::string_view prefix = "stub:script:";
  if (endpoint.starts_with(prefix)) {
    std::string_view codes = std::string_view(endpoint).substr(prefix.size());
    auto comma = codes.find(',');
    if (comma == std::string_view::npos) throw Error("stub:script needs <latin>,<cyrillic> codes");
    return LangIdHandle::connect(std::make_unique<LoopbackChannel>(std::make_shared<ScriptLangIdService>(
        std::string(codes.substr(0, comma)), std::string(codes.substr(comma + 1)))));
  }
  return LangIdHandle::connect(open_channel(endpoint));
}

using PromptTargets = std::unordered_map<std::string, std::string>;

/// "stub:noisy" | "stub:echo" | "http://…". The noisy stub copies the target
/// registered for each prompt (the reference when present, else the source).
inline std::unique_ptr<CompletionBackend> resolve_backend(const RunConfig& cfg,
                                                          std::shared_ptr<const PromptTargets> targets) {
  if (cfg.backend == "stub:noisy")
    return std::make_unique<NoisyCopyBackend>(
        cfg.seed,
        [targets](std::string_view prompt) -> std::optional<std::string> {
          if (!targets) return std::nullopt;
          auto it = targets->find(std::string(prompt));
          if (it == targets->end()) return std::nullopt;
          return it->second;
        },
        cfg.stub_noise);
  if (cfg.backend == "stub:echo") return std::make_unique<EchoBackend>();
  if (cfg.backend.starts_with("http://")) return std::make_unique<HttpBackend>(cfg.backend);
  throw Error("unknown backend '" + cfg.backend + "'");
}

// ---------------------------------------------------------------------------
// Helpers

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the
/// first failure by index.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  std::vector<std::exception_ptr> errors(n);
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n && !failed; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
            failed = true;
          }
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::vector<Shot> load_shots(const std::filesystem::path& path) {
  std::vector<Shot> out;
  detail::for_each_jsonl(path, [&](std::size_t, const json& obj) {
    out.push_back({detail::require_string(obj, "source"), detail::require_string(obj, "translation")});
  });
  return out;
}

inline std::filesystem::path sidecar(const std::filesystem::path& out, std::string_view suffix) {
  return std::filesystem::path(out.string() + std::string(suffix));
}

inline std::unordered_map<std::string, const SourceSegment*> index_segments(
    const std::vector<SourceSegment>& segs) {
  std::unordered_map<std::string, const SourceSegment*> idx;
  for (const auto& s : segs) idx.emplace(s.id, &s);
  return idx;
}

/// Renders the translation prompt for a segment under `cfg`.
inline std::string segment_prompt(const RunConfig& cfg, const SourceSegment& seg,
                                  std::span<const Shot> shots) {
  const TemplateId id = parse_template_id(cfg.template_id);
  if (id == TemplateId::multi_n)
    throw Error("multi_n returns N translations in one completion; generate with a single-output template");
  return build_translation_prompt(id, language_name(seg.src_lang), language_name(seg.tgt_lang),
                                  seg.text, shots);
}

/// Hidden targets for the noisy stub, keyed by rendered prompt.
inline std::shared_ptr<PromptTargets> prompt_targets(const RunConfig& cfg,
                                                     const std::vector<SourceSegment>& segs,
                                                     std::span<const Shot> shots) {
  auto t = std::make_shared<PromptTargets>();
  for (const auto& s : segs) (*t)[segment_prompt(cfg, s, shots)] = s.reference.value_or(s.text);
  return t;
}

// ---------------------------------------------------------------------------
// Subcommands

struct GenerateResult {
  std::vector<HypothesisSet> sets;
  CostLedger ledger;
};

/// Samples hypothesis sets for `segments` under `cfg.sampling`.
inline GenerateResult generate_sets(const RunConfig& cfg, const std::vector<SourceSegment>& segments) {
  cfg.validate();
  std::vector<Shot> shots;
  if (cfg.shots_path) shots = load_shots(*cfg.shots_path);
  auto backend = resolve_backend(cfg, prompt_targets(cfg, segments, shots));

  GenerateResult r;
  r.sets.resize(segments.size());
  std::vector<CostLedger> ledgers(segments.size());
  parallel_for(segments.size(), cfg.parallelism, [&](std::size_t i) {
    const auto& seg = segments[i];
    r.sets[i] = sample_hypotheses(*backend, seg.id, segment_prompt(cfg, seg, shots), cfg.sampling,
                                  ledgers[i], cfg.template_id);
  });
  for (const auto& l : ledgers) r.ledger.merge(l);
  return r;
}

/// Writes <out> (hypothesis sets) and <out>.ledger.jsonl.
inline void run_generate(const RunConfig& cfg, const std::filesystem::path& sources_path,
                         const std::filesystem::path& out_path) {
  const auto segments = load_segments(sources_path);
  auto r = generate_sets(cfg, segments);
  write_ledger(sidecar(out_path, ".ledger.jsonl"), r.ledger, cfg.stamp());
  write_hypothesis_sets(out_path, r.sets, cfg.stamp());
}

struct EnsembleRunStats {
  std::size_t utility_wire_requests = 0;  // scorer calls made through a handle
};

inline std::vector<EnsembleSelection> ensemble_sets(const RunConfig& cfg,
                                                    const std::vector<HypothesisSet>& sets,
                                                    const std::vector<SourceSegment>& segments,
                                                    Method method,
                                                    std::vector<std::string>* matrix_dump = nullptr,
                                                    CostLedger* ledger = nullptr) {
  cfg.validate();
  const auto idx = index_segments(segments);
  auto segment_for = [&](const HypothesisSet& s) -> const SourceSegment& {
    auto it = idx.find(s.segment_id);
    if (it == idx.end()) throw Error("no source segment for hypothesis set '" + s.segment_id + "'");
    return *it->second;
  };

  std::optional<ResolvedScorer> scorer;
  std::unique_ptr<CompletionBackend> backend;
  switch (method) {
    case Method::mbr: {
      auto ep = cfg.scorer("utility");
      if (!ep) throw Error("method mbr needs a utility scorer");
      scorer.emplace(resolve_scorer(*ep));
      break;
    }
    case Method::rank: {
      auto ep = cfg.scorer("qe");
      if (!ep) throw Error("method rank needs a qe scorer (--scorer qe=...)");
      scorer.emplace(resolve_scorer(*ep));
      if (scorer->needs_reference()) throw Error("qe scorer '" + scorer->name() + "' needs a reference");
      break;
    }
    case Method::oracle: {
      auto ep = cfg.scorer("oracle");
      if (!ep) throw Error("method oracle needs an oracle scorer");
      scorer.emplace(resolve_scorer(*ep));
      break;
    }
    case Method::choose_best:
    case Method::generate_best:
      backend = resolve_backend(cfg, nullptr);
      break;
    case Method::greedy:
    case Method::sample:
      break;
  }

  std::vector<EnsembleSelection> out(sets.size());
  std::vector<std::string> dumps(sets.size());
  std::vector<CostLedger> ledgers(sets.size());
  const MbrOptions mbr_opts{cfg.include_self, cfg.pseudo_references};

  parallel_for(sets.size(), cfg.parallelism, [&](std::size_t i) {
    const HypothesisSet& hyps = sets[i];
    const SourceSegment& seg = segment_for(hyps);
    switch (method) {
      case Method::mbr: {
        const UtilityMatrix m = scorer->matrix(seg.text, hyps, 1);
        out[i] = mbr_select(m, mbr_opts);
        if (m.n() >= 2) {
          const auto d = diversity(m);
          out[i].diagnostics["diversity"] = d.value;
          out[i].diagnostics["diversity_clamped"] = static_cast<double>(d.clamped);
        }
        if (matrix_dump) dumps[i] = m.to_jsonl();
        break;
      }
      case Method::rank: {
        std::vector<double> s;
        if (auto* h = scorer->handle())
          s = qe_scores(seg.text, hyps, *h);
        else
          for (const auto& hyp : hyps.hypotheses) s.push_back(scorer->score(seg.text, hyp.text, {}));
        out[i] = rank_select(hyps, s);
        break;
      }
      case Method::oracle:
        if (auto* h = scorer->handle())
          out[i] = oracle_select(hyps, seg.reference, seg.text, *h);
        else
          out[i] = oracle_select(hyps, seg.reference, seg.text, *scorer->function());
        break;
      case Method::choose_best:
        if (hyps.size() < 2) throw Error("choose_best needs >= 2 hypotheses for '" + hyps.segment_id + "'");
        out[i] = choose_best(*backend, hyps, language_name(seg.src_lang), language_name(seg.tgt_lang),
                             seg.text, ledgers[i]);
        break;
      case Method::generate_best:
        out[i] = generate_best(*backend, hyps, language_name(seg.src_lang),
                               language_name(seg.tgt_lang), seg.text, ledgers[i]);
        break;
      case Method::greedy:
      case Method::sample:
        out[i] = EnsembleSelection{hyps.segment_id, method, 0, hyps.text(0), std::nullopt, {}};
        break;
    }
  });
  if (matrix_dump) *matrix_dump = std::move(dumps);
  if (ledger)
    for (const auto& l : ledgers) ledger->merge(l);
  return out;
}

/// Writes <out> (selections); LLM-based methods also write <out>.ledger.jsonl.
inline void run_ensemble(const RunConfig& cfg, const std::filesystem::path& hyps_path,
                         const std::filesystem::path& sources_path,
                         const std::filesystem::path& out_path, Method method,
                         const std::optional<std::filesystem::path>& dump_matrices = std::nullopt) {
  const auto sets = load_hypothesis_sets(hyps_path);
  const auto segments = load_segments(sources_path);
  std::vector<std::string> dumps;
  CostLedger ledger;
  auto sel = ensemble_sets(cfg, sets, segments, method, dump_matrices ? &dumps : nullptr, &ledger);
  if (dump_matrices) atomic_write_lines(*dump_matrices, dumps);
  if (method == Method::choose_best || method == Method::generate_best)
    write_ledger(sidecar(out_path, ".ledger.jsonl"), ledger, cfg.stamp());
  write_selections(out_path, sel, cfg.stamp());
}

/// Per-segment diversity under the utility scorer, one JSONL line each.
inline void run_diversity(const RunConfig& cfg, const std::filesystem::path& hyps_path,
                          const std::filesystem::path& sources_path,
                          const std::filesystem::path& out_path) {
  cfg.validate();
  const auto sets = load_hypothesis_sets(hyps_path);
  const auto segments = load_segments(sources_path);
  const auto idx = index_segments(segments);
  auto ep = cfg.scorer("utility");
  if (!ep) throw Error("diversity needs a utility scorer");
  const ResolvedScorer scorer = resolve_scorer(*ep);
  std::vector<std::string> lines(sets.size());
  const auto stamp = cfg.stamp();
  parallel_for(sets.size(), cfg.parallelism, [&](std::size_t i) {
    auto it = idx.find(sets[i].segment_id);
    if (it == idx.end()) throw Error("no source segment for '" + sets[i].segment_id + "'");
    const auto d = diversity(scorer.matrix(it->second->text, sets[i], 1));
    ordered_json j;
    j["segment_id"] = sets[i].segment_id;
    j["n"] = sets[i].size();
    j["diversity"] = d.value;
    j["clamped"] = d.clamped;
    detail::append_stamp(j, stamp);
    lines[i] = j.dump();
  });
  atomic_write_lines(out_path, lines);
}

/// Per-segment seed: the run seed mixed with the segment id, so a segment's
/// perturbation does not depend on its position in the file.
inline std::uint64_t segment_seed(std::uint64_t run_seed, std::string_view segment_id) {
  return mix64(run_seed, fnv1a64(segment_id));
}

/// Writes perturbed sources to <out> and records to <out>.records.jsonl.
inline void run_perturb(const RunConfig& cfg, const std::filesystem::path& sources_path,
                        const std::filesystem::path& out_path, PerturbationKind kind,
                        const std::optional<std::filesystem::path>& tokens_path) {
  const auto segments = load_segments(sources_path);
  std::vector<std::string> tokens;
  if (kind == PerturbationKind::insert) {
    if (!tokens_path) throw Error("perturb --kind insert needs --tokens <file>");
    tokens = load_token_list(*tokens_path);
  }
  std::vector<SourceSegment> perturbed;
  std::vector<std::string> records;
  const auto stamp = cfg.stamp();
  for (const auto& seg : segments) {
    PerturbationRecord r;
    try {
      r = perturb(seg, kind, segment_seed(cfg.seed, seg.id), tokens);
    } catch (const Error& e) {
      throw Error("segment '" + seg.id + "': " + e.what());
    }
    SourceSegment p = seg;
    p.text = r.perturbed;
    perturbed.push_back(std::move(p));
    auto j = to_json(r);
    detail::append_stamp(j, stamp);
    records.push_back(j.dump());
  }
  atomic_write_lines(sidecar(out_path, ".records.jsonl"), records);
  write_segments(out_path, perturbed);
}

struct SweepRow {
  double temperature = 0.0;
  double diversity = 0.0;
  std::optional<double> quality_mbr;
  std::optional<double> quality_rank;
};

/// For each temperature: sample, build matrices, and average diversity and
/// selection quality (utility of the selection against the reference).
inline std::vector<SweepRow> sweep_temperature(const RunConfig& cfg,
                                               const std::vector<SourceSegment>& segments,
                                               const std::vector<double>& temps) {
  if (temps.empty()) throw Error("sweep needs at least one temperature");
  if (cfg.sampling.n < 2) throw Error("sweep needs n >= 2 to measure diversity");
  auto ep = cfg.scorer("utility");
  if (!ep) throw Error("sweep needs a utility scorer");
  const ResolvedScorer utility = resolve_scorer(*ep);
  std::optional<ResolvedScorer> qe;
  if (auto q = cfg.scorer("qe")) qe.emplace(resolve_scorer(*q));

  const auto idx = index_segments(segments);
  std::vector<SweepRow> rows;
  for (double t : temps) {
    RunConfig c = cfg;
    c.sampling = SamplingConfig::custom(t, cfg.sampling.top_p, cfg.sampling.n);
    c.sampling.max_tokens = cfg.sampling.max_tokens;
    const auto gen = generate_sets(c, segments);
    std::vector<double> div(segments.size()), qm(segments.size()), qr(segments.size());
    parallel_for(segments.size(), cfg.parallelism, [&](std::size_t i) {
      const auto& seg = segments[i];
      const auto m = utility.matrix(seg.text, gen.sets[i], 1);
      div[i] = diversity(m).value;
      if (seg.reference) {
        qm[i] = utility.score(seg.text, mbr_select(m).chosen_text, *seg.reference);
        if (qe) {
          std::vector<double> s;
          if (auto* h = qe->handle())
            s = qe_scores(seg.text, gen.sets[i], *h);
          else
            for (const auto& hyp : gen.sets[i].hypotheses) s.push_back(qe->score(seg.text, hyp.text, {}));
          qr[i] = utility.score(seg.text, rank_select(gen.sets[i], s).chosen_text, *seg.reference);
        }
      }
    });
    SweepRow row{t, 0.0, std::nullopt, std::nullopt};
    double qm_sum = 0, qr_sum = 0;
    std::size_t refs = 0;
    for (std::size_t i = 0; i < segments.size(); ++i) {
      row.diversity += div[i];
      if (segments[i].reference) {
        ++refs;
        qm_sum += qm[i];
        qr_sum += qr[i];
      }
    }
    row.diversity /= static_cast<double>(segments.size());
    if (refs) {
      row.quality_mbr = qm_sum / static_cast<double>(refs);
      if (qe) row.quality_rank = qr_sum / static_cast<double>(refs);
    }
    rows.push_back(row);
  }
  return rows;
}

/// CSV: temperature,diversity,quality_mbr,quality_rank,config_hash,seed.
inline void run_sweep_temperature(const RunConfig& cfg, const std::filesystem::path& sources_path,
                                  const std::vector<double>& temps,
                                  const std::filesystem::path& out_path) {
  const auto segments = load_segments(sources_path);
  const auto rows = sweep_temperature(cfg, segments, temps);
  const auto stamp = cfg.stamp();
  std::vector<std::string> lines{"temperature,diversity,quality_mbr,quality_rank,config_hash,seed"};
  for (const auto& r : rows)
    lines.push_back(format_number(r.temperature) + "," + format_number(r.diversity) + "," +
                    (r.quality_mbr ? format_number(*r.quality_mbr) : "") + "," +
                    (r.quality_rank ? format_number(*r.quality_rank) : "") + "," + stamp.config_hash +
                    "," + std::to_string(stamp.seed));
  atomic_write_lines(out_path, lines);
}

struct MethodHallucinationReport {
  Method method;
  std::size_t segments = 0;
  HallucinationRate rate;
  std::vector<HallucinationVerdict> verdicts;
};

/// Applies the hallucination rules per method. With gate scope "all" a
/// segment enters the denominator only when every method's unperturbed
/// output clears the gate.
inline std::vector<MethodHallucinationReport> hallucination_report(
    const RunConfig& cfg, const std::vector<EnsembleSelection>& base,
    const std::vector<EnsembleSelection>& perturbed, const std::vector<SourceSegment>& refs) {
  const auto idx = index_segments(refs);
  std::vector<Method> order;
  std::map<Method, std::map<std::string, const EnsembleSelection*>> b, p;
  for (const auto& s : base) {
    if (!b.contains(s.method)) order.push_back(s.method);
    if (!b[s.method].emplace(s.segment_id, &s).second)
      throw Error("duplicate base selection for '" + s.segment_id + "'");
  }
  for (const auto& s : perturbed)
    if (!p[s.method].emplace(s.segment_id, &s).second)
      throw Error("duplicate perturbed selection for '" + s.segment_id + "'");
  if (b.size() != p.size()) throw Error("base and perturbed files cover different methods");
  for (const auto& [m, segs] : b) {
    auto it = p.find(m);
    if (it == p.end()) throw Error("perturbed file lacks method " + std::string(to_string(m)));
    if (segs.size() != it->second.size() ||
        !std::equal(segs.begin(), segs.end(), it->second.begin(),
                    [](const auto& x, const auto& y) { return x.first == y.first; }))
      throw Error("segment ids differ between base and perturbed selections for method " +
                  std::string(to_string(m)));
  }

  auto reference = [&](const std::string& id) -> const std::string& {
    auto it = idx.find(id);
    if (it == idx.end() || !it->second->reference) throw Error("no reference for segment '" + id + "'");
    return *it->second->reference;
  };

  std::map<std::string, bool> all_pass;
  for (const auto& [m, segs] : b)
    for (const auto& [id, s] : segs) {
      const bool pass = sentence_bleu(s->chosen_text, reference(id)) > cfg.gate_bleu;
      auto [it, inserted] = all_pass.try_emplace(id, pass);
      if (!inserted) it->second = it->second && pass;
    }

  std::vector<MethodHallucinationReport> out;
  for (Method m : order) {
    MethodHallucinationReport r{m, 0, {}, {}};
    for (const auto& [id, s] : b[m]) {
      const std::string& ref = reference(id);
      auto v = detect_hallucination(sentence_bleu(s->chosen_text, ref),
                                    sentence_bleu(p[m][id]->chosen_text, ref), cfg.gate_bleu,
                                    cfg.hall_bleu, id);
      if (cfg.gate_scope == "all") {
        v.passed_gate = all_pass[id];
        v.is_hallucination = v.passed_gate && v.perturbed_bleu < cfg.hall_bleu;
      }
      r.verdicts.push_back(std::move(v));
    }
    r.segments = r.verdicts.size();
    r.rate = hallucination_rate(r.verdicts);
    out.push_back(std::move(r));
  }
  return out;
}

/// CSV per method plus <out>.verdicts.jsonl.
inline void run_hallucination_report(const RunConfig& cfg, const std::filesystem::path& base_path,
                                     const std::filesystem::path& perturbed_path,
                                     const std::filesystem::path& refs_path,
                                     const std::filesystem::path& out_path) {
  const auto reports = hallucination_report(cfg, load_selections(base_path),
                                            load_selections(perturbed_path), load_segments(refs_path));
  const auto stamp = cfg.stamp();
  std::vector<std::string> csv{
      "method,segments,passed_gate,hallucinations,rate,empty_denominator,config_hash,seed"};
  std::vector<std::string> verdicts;
  for (const auto& r : reports) {
    csv.push_back(std::string(to_string(r.method)) + "," + std::to_string(r.segments) + "," +
                  std::to_string(r.rate.passed) + "," + std::to_string(r.rate.hallucinations) + "," +
                  format_number(r.rate.percent) + "," + (r.rate.empty_denominator ? "1" : "0") + "," +
                  stamp.config_hash + "," + std::to_string(stamp.seed));
    for (const auto& v : r.verdicts) {
      ordered_json j;
      j["method"] = std::string(to_string(r.method));
      j["segment_id"] = v.segment_id;
      j["gate_bleu"] = v.gate_bleu;
      j["perturbed_bleu"] = v.perturbed_bleu;
      j["passed_gate"] = v.passed_gate;
      j["is_hallucination"] = v.is_hallucination;
      detail::append_stamp(j, stamp);
      verdicts.push_back(j.dump());
    }
  }
  atomic_write_lines(sidecar(out_path, ".verdicts.jsonl"), verdicts);
  atomic_write_lines(out_path, csv);
}

/// CSV: method,total,wrong,rate,expected_lang,config_hash,seed.
inline void run_langid_report(const RunConfig& cfg, const std::filesystem::path& selections_path,
                              const std::string& expected_lang, const std::filesystem::path& out_path) {
  auto ep = cfg.scorer("langid");
  if (!ep) throw Error("langid-report needs --scorer langid=<endpoint>");
  auto langid = resolve_langid(*ep);
  const auto sel = load_selections(selections_path);
  std::vector<Method> order;
  std::map<Method, std::vector<EnsembleSelection>> by_method;
  for (const auto& s : sel) {
    if (!by_method.contains(s.method)) order.push_back(s.method);
    by_method[s.method].push_back(s);
  }
  if (order.empty()) throw Error("no selections in " + selections_path.string());
  const auto stamp = cfg.stamp();
  std::vector<std::string> csv{"method,total,wrong,rate,expected_lang,config_hash,seed"};
  for (Method m : order) {
    const auto& group = by_method[m];
    const double rate = wrong_language_rate(group, *langid, expected_lang);
    const auto wrong = static_cast<std::size_t>(std::llround(rate * group.size() / 100.0));
    csv.push_back(std::string(to_string(m)) + "," + std::to_string(group.size()) + "," +
                  std::to_string(wrong) + "," + format_number(rate) + "," + expected_lang + "," +
                  stamp.config_hash + "," + std::to_string(stamp.seed));
  }
  atomic_write_lines(out_path, csv);
}

/// CSV: ledger,total_tokens,relative_cost,rounded_cost,config_hash,seed.
inline void run_cost_report(const RunConfig& cfg, const std::vector<std::filesystem::path>& ledgers,
                            const std::filesystem::path& baseline_path,
                            const std::filesystem::path& out_path) {
  if (ledgers.empty()) throw Error("cost-report needs at least one ledger (--in)");
  const CostLedger baseline = load_ledger(baseline_path);
  const auto stamp = cfg.stamp();
  std::vector<std::string> csv{"ledger,total_tokens,relative_cost,rounded_cost,config_hash,seed"};
  for (const auto& p : ledgers) {
    const CostLedger l = load_ledger(p);
    const double rel = relative_cost(l, baseline);
    csv.push_back(p.filename().string() + "," + std::to_string(l.total_tokens()) + "," +
                  format_number(rel) + "," + std::to_string(rounded_cost(rel)) + "," +
                  stamp.config_hash + "," + std::to_string(stamp.seed));
  }
  atomic_write_lines(out_path, csv);
}

}  // namespace hypens
