#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "core.hpp"
#include "metrics.hpp"
#include "mixer.hpp"

namespace hypens {

// ---------------------------------------------------------------------------
// Prompt templates

class UnboundSlotError : public Error {
 public:
  using Error::Error;
};

enum class TemplateId { hendy, peng, gao, zhang, multi_n, llama_variant, choose_best, generate_best };

inline constexpr std::array<std::pair<TemplateId, std::string_view>, 8> template_names{{
    {TemplateId::hendy, "hendy"},
    {TemplateId::peng, "peng"},
    {TemplateId::gao, "gao"},
    {TemplateId::zhang, "zhang"},
    {TemplateId::multi_n, "multi_n"},
    {TemplateId::llama_variant, "llama_variant"},
    {TemplateId::choose_best, "choose_best"},
    {TemplateId::generate_best, "generate_best"},
}};

inline std::string_view to_string(TemplateId id) {
  for (const auto& [k, v] : template_names)
    if (k == id) return v;
  throw Error("unknown template enum value");
}

inline TemplateId parse_template_id(std::string_view s) {
  for (const auto& [k, v] : template_names)
    if (v == s) return k;
  throw Error("unknown template id '" + std::string(s) + "'");
}

inline bool is_translation_template(TemplateId id) {
  return id != TemplateId::choose_best && id != TemplateId::generate_best;
}

/// Template text with `{slot}` placeholders. Rendering is a single left-to-
/// right pass, so slot values containing braces are never re-expanded.
struct PromptTemplate {
  TemplateId id;
  std::string_view text;

  std::vector<std::string> slots() const {
    std::vector<std::string> out;
    for (std::size_t i = text.find('{'); i != std::string_view::npos; i = text.find('{', i + 1)) {
      auto close = text.find('}', i);
      std::string s(text.substr(i + 1, close - i - 1));
      if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(std::move(s));
    }
    return out;
  }

  std::string render(const std::map<std::string, std::string, std::less<>>& bindings) const {
    std::string out;
    out.reserve(text.size() + 64);
    std::size_t i = 0;
    while (i < text.size()) {
      auto open = text.find('{', i);
      if (open == std::string_view::npos) {
        out.append(text.substr(i));
        break;
      }
      out.append(text.substr(i, open - i));
      auto close = text.find('}', open);
      std::string_view slot = text.substr(open + 1, close - open - 1);
      auto it = bindings.find(slot);
      if (it == bindings.end())
        throw UnboundSlotError("template '" + std::string(to_string(id)) + "' slot {" +
                               std::string(slot) + "} is unbound");
      out.append(it->second);
      i = close + 1;
    }
    return out;
  }
};

inline const PromptTemplate& prompt_template(TemplateId id) {
  static const std::array<PromptTemplate, 8> table{{
      {TemplateId::hendy,
       "Translate this sentence from {src_lang} to {tgt_lang}.\nSource: {source}\nTarget:"},
      {TemplateId::peng, "Please provide the {tgt_lang} translation for this sentence: {source}"},
      {TemplateId::gao,
       "This is a {src_lang} to {tgt_lang} translation task, please provide the {tgt_lang} "
       "translation for this sentence: {source}"},
      {TemplateId::zhang, "{src_lang}: {source}\n{tgt_lang}:"},
      {TemplateId::multi_n,
       "Translate this sentence from {src_lang} to {tgt_lang} in {n} different ways.\n"
       "Source: {source}\n{n} translations:"},
      {TemplateId::llama_variant,
       "Translate this sentence from {src_lang} to {tgt_lang}.\n{src_lang} Source: {source}\n"
       "{tgt_lang} Translation:"},
      {TemplateId::choose_best,
       "This is a multiple choice question, choose a single answer. What is the best {tgt_lang} "
       "translation for this {src_lang} sentence?\nSource: {source}\n{options}\n"
       "Correct answer: Option"},
      {TemplateId::generate_best,
       "Use the following translation hypotheses to generate the best possible {tgt_lang} "
       "translation for this {src_lang} sentence.\nSource: {source}\nTranslation hypotheses:\n"
       "{hypotheses}\nBest possible translation:"},
  }};
  for (const auto& t : table)
    if (t.id == id) return t;
  throw Error("unknown template");
}

struct Shot {
  std::string source;
  std::string translation;
};

/// Renders a translation prompt. Few-shot examples are rendered as completed
/// instances of the same template, separated from each other and from the
/// query by a blank line.
inline std::string build_translation_prompt(TemplateId id, std::string_view src_lang_name,
                                            std::string_view tgt_lang_name, std::string_view source,
                                            std::span<const Shot> shots = {},
                                            std::optional<int> n = std::nullopt) {
  if (!is_translation_template(id))
    throw Error("'" + std::string(to_string(id)) + "' is not a translation template");
  if (!shots.empty() && id == TemplateId::multi_n)
    throw Error("template 'multi_n' has no few-shot layout");
  const PromptTemplate& t = prompt_template(id);
  std::map<std::string, std::string, std::less<>> b{{"src_lang", std::string(src_lang_name)},
                                                    {"tgt_lang", std::string(tgt_lang_name)}};
  if (n) {
    if (*n < 1) throw Error("multi_n needs N >= 1");
    b["n"] = std::to_string(*n);
  }
  std::string out;
  const char joiner = t.text.ends_with(':') ? ' ' : '\n';
  for (const auto& s : shots) {
    b["source"] = s.source;
    out += t.render(b);
    out.push_back(joiner);
    out += s.translation;
    out += "\n\n";
  }
  b["source"] = std::string(source);
  out += t.render(b);
  return out;
}

inline constexpr std::size_t max_choose_best_options = 26;

inline std::string build_choosebest_prompt(std::string_view src_lang_name,
                                           std::string_view tgt_lang_name, std::string_view source,
                                           std::span<const std::string> hyps) {
  if (hyps.size() < 2 || hyps.size() > max_choose_best_options)
    throw Error("ChooseBest needs between 2 and 26 options, got " + std::to_string(hyps.size()));
  std::string options;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    if (i) options.push_back('\n');
    options += "Option ";
    options.push_back(static_cast<char>('A' + i));
    options += ". ";
    options += hyps[i];
  }
  return prompt_template(TemplateId::choose_best)
      .render({{"src_lang", std::string(src_lang_name)},
               {"tgt_lang", std::string(tgt_lang_name)},
               {"source", std::string(source)},
               {"options", options}});
}

inline std::string build_generatebest_prompt(std::string_view src_lang_name,
                                             std::string_view tgt_lang_name,
                                             std::string_view source,
                                             std::span<const std::string> hyps) {
  if (hyps.empty()) throw Error("GenerateBest needs at least one hypothesis");
  std::string list;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    if (i) list.push_back('\n');
    list += hyps[i];
  }
  return prompt_template(TemplateId::generate_best)
      .render({{"src_lang", std::string(src_lang_name)},
               {"tgt_lang", std::string(tgt_lang_name)},
               {"source", std::string(source)},
               {"hypotheses", list}});
}

/// Zero-based option index from a free-form ChooseBest completion. An
/// explicit "Option X" wins; otherwise the first standalone capital letter.
inline std::size_t parse_choosebest_answer(std::string_view completion, std::size_t n_options) {
  if (n_options < 2) throw Error("ChooseBest answers need at least two options");
  auto is_alnum = [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
  };
  auto standalone = [&](std::size_t i) {
    const char c = completion[i];
    if (c < 'A' || c > 'Z') return false;
    if (i > 0 && is_alnum(completion[i - 1])) return false;
    if (i + 1 < completion.size() && is_alnum(completion[i + 1])) return false;
    return true;
  };
  auto check = [&](char letter) -> std::size_t {
    const std::size_t idx = static_cast<std::size_t>(letter - 'A');
    if (idx >= n_options)
      throw Error(std::string("ChooseBest answer '") + letter + "' is beyond the " +
                  std::to_string(n_options) + " options");
    return idx;
  };
  for (std::size_t p = completion.find("Option"); p != std::string_view::npos;
       p = completion.find("Option", p + 1)) {
    std::size_t i = p + 6;
    while (i < completion.size() && (completion[i] == ' ' || completion[i] == '\t')) ++i;
    if (i < completion.size() && standalone(i)) return check(completion[i]);
  }
  for (std::size_t i = 0; i < completion.size(); ++i)
    if (standalone(i)) return check(completion[i]);
  throw Error("no option letter found in ChooseBest completion");
}

// ---------------------------------------------------------------------------
// Sampling configuration

enum class SamplingMode { greedy, unbiased, biased, custom };

inline std::string_view to_string(SamplingMode m) {
  switch (m) {
    case SamplingMode::greedy: return "greedy";
    case SamplingMode::unbiased: return "unbiased";
    case SamplingMode::biased: return "biased";
    case SamplingMode::custom: return "custom";
  }
  return "custom";
}

inline SamplingMode parse_sampling_mode(std::string_view s) {
  if (s == "greedy") return SamplingMode::greedy;
  if (s == "unbiased") return SamplingMode::unbiased;
  if (s == "biased") return SamplingMode::biased;
  if (s == "custom") return SamplingMode::custom;
  throw Error("unknown sampling mode '" + std::string(s) + "'");
}

struct SamplingConfig {
  double temperature = 1.0;
  double top_p = 1.0;
  int n = 1;
  int max_tokens = 256;
  SamplingMode mode = SamplingMode::custom;

  /// Temperature 0 goes to the backend as-is. Backends that reject 0 can be
  /// given `greedy_proxy_temperature` instead.
  static constexpr double greedy_proxy_temperature = 0.1;

  static SamplingConfig greedy(double temperature = 0.0) {
    return {temperature, 1.0, 1, 256, SamplingMode::greedy};
  }
  static SamplingConfig unbiased(int n) { return {1.0, 1.0, n, 256, SamplingMode::unbiased}; }
  static SamplingConfig biased(int n) { return {0.8, 0.95, n, 256, SamplingMode::biased}; }
  static SamplingConfig custom(double temperature, double top_p, int n) {
    return {temperature, top_p, n, 256, SamplingMode::custom};
  }

  void validate() const {
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) throw Error("temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw Error("top_p must lie in (0, 1]");
    if (n < 1) throw Error("n must be >= 1");
    if (max_tokens < 1) throw Error("max_tokens must be >= 1");
    switch (mode) {
      case SamplingMode::greedy:
        if (temperature > greedy_proxy_temperature || n != 1)
          throw Error("greedy mode needs temperature <= 0.1 and n = 1");
        break;
      case SamplingMode::unbiased:
        if (temperature != 1.0 || top_p != 1.0)
          throw Error("unbiased mode needs temperature = 1 and top_p = 1");
        break;
      case SamplingMode::biased:
        if (temperature != 0.8 || top_p != 0.95)
          throw Error("biased mode needs temperature = 0.8 and top_p = 0.95");
        break;
      case SamplingMode::custom:
        break;
    }
  }
};

// ---------------------------------------------------------------------------
// Cost accounting

struct CostRecord {
  std::string segment_id;
  std::string purpose;  // "generate", "choose_best", "generate_best", ...
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;

  std::int64_t total() const noexcept { return prompt_tokens + completion_tokens; }
  bool operator==(const CostRecord&) const = default;
};

/// Append-only per-call token log. Appends are thread-safe.
class CostLedger {
 public:
  CostLedger() = default;
  CostLedger(const CostLedger& o) : records_(o.records()) {}
  CostLedger& operator=(const CostLedger& o) {
    if (this != &o) {
      auto r = o.records();
      std::lock_guard lock(mu_);
      records_ = std::move(r);
    }
    return *this;
  }

  void append(CostRecord r) {
    if (r.prompt_tokens < 0 || r.completion_tokens < 0)
      throw Error("token counts must be non-negative");
    std::lock_guard lock(mu_);
    records_.push_back(std::move(r));
  }

  void merge(const CostLedger& other) {
    for (auto& r : other.records()) append(std::move(r));
  }

  std::vector<CostRecord> records() const {
    std::lock_guard lock(mu_);
    return records_;
  }

  std::int64_t total_tokens() const {
    std::lock_guard lock(mu_);
    std::int64_t t = 0;
    for (const auto& r : records_) t += r.total();
    return t;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return records_.size();
  }

 private:
  mutable std::mutex mu_;
  std::vector<CostRecord> records_;
};

/// Total tokens of `ledger` over total tokens of `baseline`.
inline double relative_cost(const CostLedger& ledger, const CostLedger& baseline) {
  const auto base = baseline.total_tokens();
  if (base <= 0) throw Error("baseline ledger has no tokens");
  return static_cast<double>(ledger.total_tokens()) / static_cast<double>(base);
}

/// Cost as shown in reports: rounded to the nearest unit.
inline long rounded_cost(double relative) { return std::lround(relative); }

inline void write_ledger(const std::filesystem::path& path, const CostLedger& ledger,
                         const std::optional<RunStamp>& stamp = std::nullopt) {
  const auto recs = ledger.records();
  atomic_write(path, [&](std::ostream& os) {
    for (const auto& r : recs) {
      ordered_json j;
      j["segment_id"] = r.segment_id;
      j["purpose"] = r.purpose;
      j["prompt_tokens"] = r.prompt_tokens;
      j["completion_tokens"] = r.completion_tokens;
      detail::append_stamp(j, stamp);
      os << j.dump() << '\n';
    }
  });
}

inline CostLedger load_ledger(const std::filesystem::path& path) {
  CostLedger l;
  detail::for_each_jsonl(path, [&](std::size_t, const json& obj) {
    l.append({detail::require_string(obj, "segment_id"), detail::require_string(obj, "purpose"),
              detail::require_count(obj, "prompt_tokens"),
              detail::require_count(obj, "completion_tokens")});
  });
  return l;
}

// ---------------------------------------------------------------------------
// Completion backends

struct CompletionRequest {
  std::string prompt;
  int n = 1;
  double temperature = 1.0;
  double top_p = 1.0;
  int max_tokens = 256;
  std::vector<std::string> stop;
};

struct CompletionChoice {
  std::string text;
  std::optional<std::int64_t> completion_tokens;
};

struct CompletionResponse {
  std::vector<CompletionChoice> choices;
  std::optional<std::int64_t> prompt_tokens;
};

inline ordered_json to_json(const CompletionRequest& r) {
  ordered_json j;
  j["prompt"] = r.prompt;
  j["n"] = r.n;
  j["temperature"] = r.temperature;
  j["top_p"] = r.top_p;
  j["max_tokens"] = r.max_tokens;
  j["stop"] = r.stop;
  return j;
}

inline CompletionResponse completion_response_from_json(const json& j) {
  CompletionResponse r;
  if (!j.is_object() || !j.contains("choices") || !j["choices"].is_array())
    throw Error("completion response lacks a choices array");
  for (const auto& c : j["choices"]) {
    CompletionChoice ch;
    ch.text = c.at("text").get<std::string>();
    if (c.contains("completion_tokens") && c["completion_tokens"].is_number_integer())
      ch.completion_tokens = c["completion_tokens"].get<std::int64_t>();
    r.choices.push_back(std::move(ch));
  }
  if (j.contains("prompt_tokens") && j["prompt_tokens"].is_number_integer())
    r.prompt_tokens = j["prompt_tokens"].get<std::int64_t>();
  return r;
}

class CompletionBackend {
 public:
  virtual ~CompletionBackend() = default;
  virtual CompletionResponse complete(const CompletionRequest& req) = 0;
};

/// Raised when a backend returns fewer completions than requested. The
/// completions that did arrive are kept in `partial`.
class PartialCompletionError : public Error {
 public:
  PartialCompletionError(const std::string& what, HypothesisSet partial)
      : Error(what), partial(std::move(partial)) {}
  HypothesisSet partial;
};

/// Requests cfg.n completions in one call and records them in order. The
/// ledger gets one record: the prompt is paid once for the whole batch.
inline HypothesisSet sample_hypotheses(CompletionBackend& backend, std::string_view segment_id,
                                       std::string_view prompt, const SamplingConfig& cfg,
                                       CostLedger& ledger, std::string_view template_id = "",
                                       std::string_view purpose = "generate") {
  cfg.validate();
  CompletionRequest req{std::string(prompt), cfg.n, cfg.temperature, cfg.top_p, cfg.max_tokens, {}};
  CompletionResponse resp = backend.complete(req);

  HypothesisSet set;
  set.segment_id = std::string(segment_id);
  const std::int64_t prompt_tokens = resp.prompt_tokens.value_or(0);
  std::int64_t completion_total = 0;
  const std::size_t keep = std::min<std::size_t>(resp.choices.size(), static_cast<std::size_t>(cfg.n));
  for (std::size_t i = 0; i < keep; ++i) {
    const auto& c = resp.choices[i];
    Hypothesis h;
    h.text = c.text;
    h.template_id = std::string(template_id);
    h.temperature = cfg.temperature;
    h.top_p = cfg.top_p;
    h.prompt_tokens = prompt_tokens;
    h.completion_tokens = c.completion_tokens.value_or(0);
    completion_total += h.completion_tokens;
    set.hypotheses.push_back(std::move(h));
  }
  ledger.append({std::string(segment_id), std::string(purpose), prompt_tokens, completion_total});
  if (keep < static_cast<std::size_t>(cfg.n))
    throw PartialCompletionError("backend returned " + std::to_string(keep) + " of " +
                                     std::to_string(cfg.n) + " completions for '" +
                                     std::string(segment_id) + "'",
                                 std::move(set));
  return set;
}

inline std::string trim_completion(std::string_view s) {
  s = unicode::trim(s);
  if (auto nl = s.find('\n'); nl != std::string_view::npos) s = unicode::trim(s.substr(0, nl));
  return std::string(s);
}

/// Asks the model to pick one hypothesis (multiple choice).
inline EnsembleSelection choose_best(CompletionBackend& backend, const HypothesisSet& hyps,
                                     std::string_view src_lang_name, std::string_view tgt_lang_name,
                                     std::string_view source, CostLedger& ledger,
                                     SamplingConfig cfg = SamplingConfig::greedy()) {
  const auto texts = hyps.texts();
  const std::string prompt = build_choosebest_prompt(src_lang_name, tgt_lang_name, source, texts);
  cfg.n = 1;
  HypothesisSet reply =
      sample_hypotheses(backend, hyps.segment_id, prompt, cfg, ledger, "choose_best", "choose_best");
  const std::size_t idx = parse_choosebest_answer(reply.text(0), texts.size());
  EnsembleSelection sel;
  sel.segment_id = hyps.segment_id;
  sel.method = Method::choose_best;
  sel.chosen_index = idx;
  sel.chosen_text = texts[idx];
  return sel;
}

/// Asks the model for a final translation conditioned on all hypotheses. The
/// answer may be new text, so no index is recorded.
inline EnsembleSelection generate_best(CompletionBackend& backend, const HypothesisSet& hyps,
                                       std::string_view src_lang_name,
                                       std::string_view tgt_lang_name, std::string_view source,
                                       CostLedger& ledger,
                                       SamplingConfig cfg = SamplingConfig::greedy()) {
  const auto texts = hyps.texts();
  const std::string prompt = build_generatebest_prompt(src_lang_name, tgt_lang_name, source, texts);
  cfg.n = 1;
  HypothesisSet reply = sample_hypotheses(backend, hyps.segment_id, prompt, cfg, ledger,
                                          "generate_best", "generate_best");
  EnsembleSelection sel;
  sel.segment_id = hyps.segment_id;
  sel.method = Method::generate_best;
  sel.chosen_text = trim_completion(reply.text(0));
  return sel;
}

/// English display names for the language codes used in prompts.
inline std::string language_name(std::string_view code) {
  static const std::map<std::string, std::string, std::less<>> names{
      {"ar", "Arabic"},  {"cs", "Czech"},     {"de", "German"},   {"en", "English"},
      {"es", "Spanish"}, {"fr", "French"},    {"ha", "Hausa"},    {"hr", "Croatian"},
      {"is", "Icelandic"}, {"it", "Italian"}, {"ja", "Japanese"}, {"liv", "Livonian"},
      {"pt", "Portuguese"}, {"ru", "Russian"}, {"sah", "Yakut"},  {"uk", "Ukrainian"},
      {"zh", "Chinese"},
  };
  if (auto it = names.find(code); it != names.end()) return it->second;
  throw Error("no display name for language code '" + std::string(code) + "'");
}

}  // namespace hypens
