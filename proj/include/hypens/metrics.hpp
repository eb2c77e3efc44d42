#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "core.hpp"
#include "unicode.hpp"

namespace hypens {

/// Closed interval of attainable scores.
struct ScoreRange {
  double lo = 0.0;
  double hi = 1.0;

  bool contains(double v) const noexcept { return v >= lo && v <= hi; }
  bool within_unit() const noexcept { return lo >= 0.0 && hi <= 1.0; }
  bool operator==(const ScoreRange&) const = default;
};

namespace detail {

struct U32Hash {
  std::size_t operator()(std::u32string_view s) const noexcept {
    return std::hash<std::u32string_view>{}(s);
  }
};

using NgramCounts = std::unordered_map<std::u32string_view, int, U32Hash>;

inline NgramCounts count_char_ngrams(std::u32string_view s, std::size_t n) {
  NgramCounts counts;
  if (s.size() < n) return counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[s.substr(i, n)];
  return counts;
}

inline std::size_t clipped_matches(const NgramCounts& cand, const NgramCounts& ref) {
  std::size_t m = 0;
  for (const auto& [gram, c] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) m += static_cast<std::size_t>(std::min(c, it->second));
  }
  return m;
}

inline std::u32string strip_spaces(std::string_view s) {
  std::u32string cps = unicode::decode_utf8(s);
  std::erase_if(cps, [](char32_t c) { return unicode::is_space(c); });
  return cps;
}

/// Whitespace tokens, each token as its own UTF-8 string.
inline std::vector<std::string> tokenize(std::string_view s) {
  std::vector<std::string> out;
  std::u32string cps = unicode::decode_utf8(s);
  std::u32string cur;
  for (char32_t c : cps) {
    if (unicode::is_space(c)) {
      if (!cur.empty()) out.push_back(unicode::encode_utf8(cur)), cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(unicode::encode_utf8(cur));
  return out;
}

}  // namespace detail

/// Character n-gram F-score in [0, 1]. Whitespace is removed before n-gram
/// extraction; precision and recall are averaged over orders that occur in
/// at least one of the strings.
inline double chrf(std::string_view candidate, std::string_view reference, int max_order = 6,
                   double beta = 2.0) {
  if (max_order < 1) throw Error("chrf: max_order must be >= 1");
  if (!(beta > 0.0)) throw Error("chrf: beta must be > 0");
  const std::u32string cand = detail::strip_spaces(candidate);
  const std::u32string ref = detail::strip_spaces(reference);
  if (cand.empty() && ref.empty()) return 1.0;

  double p_sum = 0.0, r_sum = 0.0;
  int orders = 0;
  for (std::size_t n = 1; n <= static_cast<std::size_t>(max_order); ++n) {
    const std::size_t cand_total = cand.size() >= n ? cand.size() - n + 1 : 0;
    const std::size_t ref_total = ref.size() >= n ? ref.size() - n + 1 : 0;
    if (cand_total == 0 && ref_total == 0) continue;
    std::size_t m = 0;
    if (cand_total > 0 && ref_total > 0)
      m = detail::clipped_matches(detail::count_char_ngrams(cand, n),
                                  detail::count_char_ngrams(ref, n));
    p_sum += cand_total ? static_cast<double>(m) / static_cast<double>(cand_total) : 0.0;
    r_sum += ref_total ? static_cast<double>(m) / static_cast<double>(ref_total) : 0.0;
    ++orders;
  }
  const double p = p_sum / orders;
  const double r = r_sum / orders;
  if (p + r == 0.0) return 0.0;
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (b2 * p + r);
}

/// Smoothed sentence-level BLEU in [0, 100] over whitespace tokens.
/// Order 1 is unsmoothed; orders >= 2 use add-one on matches and totals.
inline double sentence_bleu(std::string_view candidate, std::string_view reference,
                            int max_order = 4) {
  if (max_order < 1) throw Error("sentence_bleu: max_order must be >= 1");
  const auto cand = detail::tokenize(candidate);
  const auto ref = detail::tokenize(reference);
  if (cand.empty()) return 0.0;

  auto ngrams = [](const std::vector<std::string>& toks, std::size_t n) {
    std::unordered_map<std::string, int> counts;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
      std::string key;
      for (std::size_t k = 0; k < n; ++k) {
        if (k) key.push_back('\x1f');
        key += toks[i + k];
      }
      ++counts[key];
    }
    return counts;
  };

  double log_sum = 0.0;
  for (std::size_t n = 1; n <= static_cast<std::size_t>(max_order); ++n) {
    const auto cc = ngrams(cand, n);
    const auto rc = ngrams(ref, n);
    std::size_t m = 0;
    for (const auto& [g, c] : cc)
      if (auto it = rc.find(g); it != rc.end()) m += std::min(c, it->second);
    const std::size_t total = cand.size() >= n ? cand.size() - n + 1 : 0;
    double p;
    if (n == 1) {
      if (m == 0) return 0.0;
      p = static_cast<double>(m) / static_cast<double>(total);
    } else {
      p = (static_cast<double>(m) + 1.0) / (static_cast<double>(total) + 1.0);
    }
    log_sum += std::log(p);
  }
  double bleu = std::exp(log_sum / max_order);
  if (cand.size() < ref.size())
    bleu *= std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(cand.size()));
  return 100.0 * bleu;
}

/// A utility u(source, candidate, reference). For MBR the reference slot
/// holds the pseudo-reference; for QE-style scorers it is ignored.
class UtilityFunction {
 public:
  using Fn = std::function<double(std::string_view source, std::string_view candidate,
                                  std::string_view reference)>;

  UtilityFunction(std::string name, bool needs_reference, bool needs_source, ScoreRange range,
                  Fn fn)
      : name_(std::move(name)),
        needs_reference_(needs_reference),
        needs_source_(needs_source),
        range_(range),
        fn_(std::move(fn)) {}

  const std::string& name() const noexcept { return name_; }
  bool needs_reference() const noexcept { return needs_reference_; }
  bool needs_source() const noexcept { return needs_source_; }
  ScoreRange range() const noexcept { return range_; }

  double operator()(std::string_view source, std::string_view candidate,
                    std::string_view reference) const {
    return fn_(source, candidate, reference);
  }

 private:
  std::string name_;
  bool needs_reference_;
  bool needs_source_;
  ScoreRange range_;
  Fn fn_;
};

inline UtilityFunction chrf_utility(int max_order = 6, double beta = 2.0) {
  return UtilityFunction("chrf", true, false, {0.0, 1.0},
                         [max_order, beta](std::string_view, std::string_view c,
                                           std::string_view r) { return chrf(c, r, max_order, beta); });
}

inline UtilityFunction bleu_utility(int max_order = 4) {
  return UtilityFunction("bleu", true, false, {0.0, 100.0},
                         [max_order](std::string_view, std::string_view c, std::string_view r) {
                           return sentence_bleu(c, r, max_order);
                         });
}

/// Built-in utility by name ("chrf" or "bleu").
inline UtilityFunction builtin_utility(std::string_view name) {
  if (name == "chrf") return chrf_utility();
  if (name == "bleu") return bleu_utility();
  throw Error("unknown built-in utility '" + std::string(name) + "'");
}

}  // namespace hypens
