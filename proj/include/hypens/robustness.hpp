#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "core.hpp"
#include "mixer.hpp"
#include "scorer.hpp"
#include "unicode.hpp"

namespace hypens {

enum class PerturbationKind { misspell, titlecase, insert };

inline std::string_view to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::misspell: return "misspell";
    case PerturbationKind::titlecase: return "titlecase";
    case PerturbationKind::insert: return "insert";
  }
  return "misspell";
}

inline PerturbationKind parse_perturbation_kind(std::string_view s) {
  if (s == "misspell") return PerturbationKind::misspell;
  if (s == "titlecase") return PerturbationKind::titlecase;
  if (s == "insert") return PerturbationKind::insert;
  throw Error("unknown perturbation kind '" + std::string(s) + "'");
}

struct PerturbationRecord {
  std::string segment_id;
  PerturbationKind kind = PerturbationKind::misspell;
  std::string original;
  std::string perturbed;
  std::uint64_t seed = 0;
};

inline ordered_json to_json(const PerturbationRecord& r) {
  ordered_json j;
  j["segment_id"] = r.segment_id;
  j["kind"] = std::string(to_string(r.kind));
  j["original"] = r.original;
  j["perturbed"] = r.perturbed;
  j["seed"] = r.seed;
  return j;
}

namespace detail {

/// [begin, end) code-point ranges of whitespace-delimited words.
inline std::vector<std::pair<std::size_t, std::size_t>> word_spans(std::u32string_view s) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && unicode::is_space(s[i])) ++i;
    if (i == s.size()) break;
    std::size_t b = i;
    while (i < s.size() && !unicode::is_space(s[i])) ++i;
    out.emplace_back(b, i);
  }
  return out;
}

}  // namespace detail

/// Uppercases the first character of every whitespace-delimited word.
/// Nothing is lowercased, and the length in code points is unchanged.
inline std::string perturb_titlecase(std::string_view text) {
  std::u32string cps = unicode::decode_utf8(text);
  for (auto [b, e] : detail::word_spans(cps)) cps[b] = unicode::to_upper(cps[b]);
  return unicode::encode_utf8(cps);
}

/// Prepends one frequent token chosen by the seed.
inline std::string perturb_insert(std::string_view text, std::span<const std::string> frequent_tokens,
                                  std::uint64_t seed) {
  if (frequent_tokens.empty()) throw Error("frequent-token list is empty");
  const auto& tok = frequent_tokens[mix64(seed) % frequent_tokens.size()];
  std::string out;
  out.reserve(tok.size() + 1 + text.size());
  out += tok;
  out.push_back(' ');
  out += text;
  return out;
}

/// Applies one character edit to one word of length >= 2: swap two adjacent
/// distinct characters, delete a character, or duplicate a character. The
/// result is always at edit distance 1 from the input (a transposition
/// counts as one edit) and keeps the word count.
inline std::string perturb_misspell(std::string_view text, std::uint64_t seed) {
  std::u32string cps = unicode::decode_utf8(text);
  std::vector<std::pair<std::size_t, std::size_t>> eligible;
  for (auto span : detail::word_spans(cps))
    if (span.second - span.first >= 2) eligible.push_back(span);
  if (eligible.empty()) throw Error("no word of length >= 2 to misspell");

  const std::uint64_t h0 = mix64(seed);
  const auto [b, e] = eligible[h0 % eligible.size()];
  const std::size_t len = e - b;
  const std::uint64_t h1 = mix64(h0, 1);
  const std::uint64_t h2 = mix64(h0, 2);

  enum { swap, del, dup } op = static_cast<decltype(swap)>(h1 % 3);
  std::vector<std::size_t> swappable;
  if (op == swap) {
    for (std::size_t i = b; i + 1 < e; ++i)
      if (cps[i] != cps[i + 1]) swappable.push_back(i);
    if (swappable.empty()) op = del;
  }
  switch (op) {
    case swap: {
      const std::size_t i = swappable[h2 % swappable.size()];
      std::swap(cps[i], cps[i + 1]);
      break;
    }
    case del:
      cps.erase(b + h2 % len, 1);
      break;
    case dup: {
      const std::size_t i = b + h2 % len;
      cps.insert(cps.begin() + static_cast<std::ptrdiff_t>(i), cps[i]);
      break;
    }
  }
  return unicode::encode_utf8(cps);
}

inline PerturbationRecord perturb(const SourceSegment& seg, PerturbationKind kind,
                                  std::uint64_t seed, std::span<const std::string> frequent_tokens = {}) {
  PerturbationRecord r{seg.id, kind, seg.text, {}, seed};
  switch (kind) {
    case PerturbationKind::misspell: r.perturbed = perturb_misspell(seg.text, seed); break;
    case PerturbationKind::titlecase: r.perturbed = perturb_titlecase(seg.text); break;
    case PerturbationKind::insert: r.perturbed = perturb_insert(seg.text, frequent_tokens, seed); break;
  }
  return r;
}

/// One token per line, most frequent first. Blank lines are skipped.
inline std::vector<std::string> load_token_list(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    auto t = unicode::trim(line);
    if (!t.empty()) out.emplace_back(t);
  }
  if (out.empty()) throw Error("token list " + path.string() + " is empty");
  return out;
}

// ---------------------------------------------------------------------------
// Hallucination under perturbation

struct HallucinationVerdict {
  std::string segment_id;
  double gate_bleu = 0.0;
  double perturbed_bleu = 0.0;
  bool passed_gate = false;
  bool is_hallucination = false;
};

inline constexpr double default_gate_bleu = 9.0;
inline constexpr double default_hallucination_bleu = 3.0;

/// A segment counts only if its unperturbed output clears the gate; it is a
/// hallucination if the perturbed output then falls below the ceiling.
inline HallucinationVerdict detect_hallucination(double unperturbed_bleu, double perturbed_bleu,
                                                 double gate = default_gate_bleu,
                                                 double ceiling = default_hallucination_bleu,
                                                 std::string segment_id = {}) {
  HallucinationVerdict v;
  v.segment_id = std::move(segment_id);
  v.gate_bleu = unperturbed_bleu;
  v.perturbed_bleu = perturbed_bleu;
  v.passed_gate = unperturbed_bleu > gate;
  v.is_hallucination = v.passed_gate && perturbed_bleu < ceiling;
  return v;
}

struct HallucinationRate {
  double percent = 0.0;
  std::size_t passed = 0;
  std::size_t hallucinations = 0;
  bool empty_denominator = true;
};

/// Percentage over the segments that passed the gate.
inline HallucinationRate hallucination_rate(std::span<const HallucinationVerdict> verdicts) {
  HallucinationRate r;
  for (const auto& v : verdicts) {
    if (!v.passed_gate) continue;
    ++r.passed;
    if (v.is_hallucination) ++r.hallucinations;
  }
  r.empty_denominator = r.passed == 0;
  if (!r.empty_denominator)
    r.percent = 100.0 * static_cast<double>(r.hallucinations) / static_cast<double>(r.passed);
  return r;
}

/// Percentage of selections whose identified language differs from
/// `expected_lang`.
inline double wrong_language_rate(std::span<const EnsembleSelection> selections, LangIdHandle& identifier,
                                  std::string_view expected_lang) {
  if (selections.empty()) throw Error("wrong_language_rate: no selections");
  std::vector<std::string> texts;
  texts.reserve(selections.size());
  for (const auto& s : selections) texts.push_back(s.chosen_text);
  const auto langs = identifier.identify(texts);
  std::size_t wrong = 0;
  for (const auto& l : langs)
    if (l != expected_lang) ++wrong;
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(selections.size());
}

}  // namespace hypens
