#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "core.hpp"
#include "metrics.hpp"
#include "scorer.hpp"

namespace hypens {

/// Pairwise utilities for one hypothesis set.
///
/// Convention: `at(i, j)` = u(candidate = hypothesis i, pseudo-reference =
/// hypothesis j). Rows are candidates, columns pseudo-references; for
/// asymmetric utilities the two are not interchangeable. Immutable once built.
class UtilityMatrix {
 public:
  UtilityMatrix(std::string segment_id, std::vector<std::string> candidates,
                std::vector<double> entries, std::string utility_name, ScoreRange range)
      : segment_id_(std::move(segment_id)),
        candidates_(std::move(candidates)),
        entries_(std::move(entries)),
        utility_name_(std::move(utility_name)),
        range_(range) {
    const std::size_t n = candidates_.size();
    if (n == 0) throw Error("utility matrix needs at least one hypothesis");
    if (entries_.size() != n * n) throw Error("utility matrix is not square");
    for (std::size_t k = 0; k < entries_.size(); ++k) {
      const double v = entries_[k];
      if (!std::isfinite(v))
        throw Error("utility '" + utility_name_ + "' produced a non-finite entry at (" +
                    std::to_string(k / n) + "," + std::to_string(k % n) + ")");
      if (!range_.contains(v))
        throw Error("utility '" + utility_name_ + "' produced " + std::to_string(v) +
                    " outside its declared range [" + std::to_string(range_.lo) + ", " +
                    std::to_string(range_.hi) + "]");
    }
  }

  /// Builds from nested rows; handy for hand-written kernels and tests.
  static UtilityMatrix from_rows(const std::vector<std::vector<double>>& rows,
                                 std::vector<std::string> candidates = {},
                                 ScoreRange range = {-std::numeric_limits<double>::infinity(),
                                                     std::numeric_limits<double>::infinity()},
                                 std::string segment_id = "", std::string utility_name = "custom") {
    const std::size_t n = rows.size();
    if (candidates.empty())
      for (std::size_t i = 0; i < n; ++i) candidates.push_back("h" + std::to_string(i));
    if (candidates.size() != n) throw Error("candidate count does not match matrix rows");
    std::vector<double> flat;
    flat.reserve(n * n);
    for (const auto& r : rows) {
      if (r.size() != n) throw Error("utility matrix is not square");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return UtilityMatrix(std::move(segment_id), std::move(candidates), std::move(flat),
                         std::move(utility_name), range);
  }

  std::size_t n() const noexcept { return candidates_.size(); }
  double at(std::size_t i, std::size_t j) const { return entries_.at(i * n() + j); }
  const std::vector<double>& entries() const noexcept { return entries_; }
  const std::vector<std::string>& candidates() const noexcept { return candidates_; }
  const std::string& segment_id() const noexcept { return segment_id_; }
  const std::string& utility_name() const noexcept { return utility_name_; }
  ScoreRange range() const noexcept { return range_; }

  /// One debugging line: {"segment_id":…,"entries":[[…]]}.
  std::string to_jsonl() const {
    ordered_json j;
    j["segment_id"] = segment_id_;
    ordered_json rows = ordered_json::array();
    for (std::size_t i = 0; i < n(); ++i) {
      ordered_json row = ordered_json::array();
      for (std::size_t c = 0; c < n(); ++c) row.push_back(at(i, c));
      rows.push_back(std::move(row));
    }
    j["entries"] = std::move(rows);
    return j.dump();
  }

 private:
  std::string segment_id_;
  std::vector<std::string> candidates_;
  std::vector<double> entries_;
  std::string utility_name_;
  ScoreRange range_;
};

struct MatrixOptions {
  std::size_t parallelism = 1;  // worker threads for in-process utilities
};

namespace detail {

/// Distinct strings in first-occurrence order plus a slot per input.
struct Dedup {
  std::vector<std::string> unique;
  std::vector<std::size_t> slot;
};

inline Dedup dedup(const std::vector<std::string>& texts) {
  Dedup d;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& t : texts) {
    auto [it, inserted] = index.try_emplace(t, d.unique.size());
    if (inserted) d.unique.push_back(t);
    d.slot.push_back(it->second);
  }
  return d;
}

inline UtilityMatrix expand(const HypothesisSet& hyps, const Dedup& d,
                            const std::vector<double>& unique_scores, const std::string& name,
                            ScoreRange range) {
  const std::size_t n = hyps.size(), k = d.unique.size();
  std::vector<double> entries(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) entries[i * n + j] = unique_scores[d.slot[i] * k + d.slot[j]];
  return UtilityMatrix(hyps.segment_id, hyps.texts(), std::move(entries), name, range);
}

}  // namespace detail

/// Evaluates u(source, hyp_i, hyp_j) for every ordered pair of distinct
/// strings. Duplicate hypothesis strings are scored once, so at most N²
/// calls are made.
inline UtilityMatrix compute_utility_matrix(std::string_view source, const HypothesisSet& hyps,
                                            const UtilityFunction& u, MatrixOptions opts = {}) {
  if (hyps.size() == 0) throw Error("hypothesis set '" + hyps.segment_id + "' is empty");
  const detail::Dedup d = detail::dedup(hyps.texts());
  const std::size_t k = d.unique.size();
  std::vector<double> scores(k * k);

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t p = begin; p < end; ++p)
      scores[p] = u(source, d.unique[p / k], d.unique[p % k]);
  };
  const std::size_t total = k * k;
  const std::size_t threads = std::clamp<std::size_t>(opts.parallelism, 1, std::max<std::size_t>(total, 1));
  if (threads == 1) {
    work(0, total);
  } else {
    std::vector<std::jthread> pool;
    std::vector<std::exception_ptr> errors(threads);
    const std::size_t chunk = (total + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          work(std::min(total, t * chunk), std::min(total, (t + 1) * chunk));
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    pool.clear();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return detail::expand(hyps, d, scores, u.name(), u.range());
}

/// Same, through an external scorer. All distinct pairs travel in a single
/// batch; the handle's memo table absorbs repeats across calls. Scorers do
/// not declare a range, so the caller supplies one (unbounded by default).
inline UtilityMatrix compute_utility_matrix(
    std::string_view source, const HypothesisSet& hyps, ScorerHandle& scorer,
    ScoreRange range = {-std::numeric_limits<double>::infinity(),
                        std::numeric_limits<double>::infinity()}) {
  if (hyps.size() == 0) throw Error("hypothesis set '" + hyps.segment_id + "' is empty");
  const detail::Dedup d = detail::dedup(hyps.texts());
  const std::size_t k = d.unique.size();
  std::vector<ScoreRequest> batch;
  batch.reserve(k * k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      batch.push_back({static_cast<std::int64_t>(i * k + j), std::string(source), d.unique[i],
                       d.unique[j]});
  return detail::expand(hyps, d, scorer.score_batch(batch), scorer.name(), range);
}

struct MbrOptions {
  /// Count u(y_i, y_i) in row i's average. The candidate is one of the M = N
  /// samples, so the default keeps it.
  bool include_self = true;
  /// Use only the first M hypotheses as pseudo-references; nullopt means M = N.
  std::optional<std::size_t> pseudo_references;
};

/// Monte Carlo expected utility per candidate: the mean of its row over the
/// pseudo-reference columns.
inline std::vector<double> expected_utilities(const UtilityMatrix& m, const MbrOptions& opts = {}) {
  const std::size_t n = m.n();
  const std::size_t refs = opts.pseudo_references.value_or(n);
  if (refs < 1 || refs > n) throw Error("pseudo-reference count must lie in [1, N]");
  std::vector<double> eu(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    std::size_t terms = 0;
    for (std::size_t j = 0; j < refs; ++j) {
      if (!opts.include_self && j == i) continue;
      sum += m.at(i, j);
      ++terms;
    }
    if (terms == 0) throw Error("excluding the self term leaves candidate " + std::to_string(i) +
                                " without pseudo-references");
    eu[i] = sum / static_cast<double>(terms);
  }
  return eu;
}

/// Lowest index attaining the maximum.
inline std::size_t argmax_lowest(std::span<const double> values) {
  if (values.empty()) throw Error("argmax of an empty score list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

inline std::string indexed_key(std::string_view prefix, std::size_t i) {
  return std::string(prefix) + "." + std::to_string(i);
}

inline EnsembleSelection mbr_select(const UtilityMatrix& m, const MbrOptions& opts = {}) {
  const auto eu = expected_utilities(m, opts);
  const std::size_t best = argmax_lowest(eu);
  EnsembleSelection sel;
  sel.segment_id = m.segment_id();
  sel.method = Method::mbr;
  sel.chosen_index = best;
  sel.chosen_text = m.candidates()[best];
  sel.score = eu[best];
  for (std::size_t i = 0; i < eu.size(); ++i) sel.diagnostics[indexed_key("expected_utility", i)] = eu[i];
  return sel;
}

/// QE reranking: argmax of reference-free scores, lowest index on ties.
inline EnsembleSelection rank_select(const HypothesisSet& hyps, std::span<const double> qe_scores) {
  if (qe_scores.empty()) throw Error("rank_select: empty score list");
  if (qe_scores.size() != hyps.size())
    throw Error("rank_select: " + std::to_string(qe_scores.size()) + " scores for " +
                std::to_string(hyps.size()) + " hypotheses");
  for (double s : qe_scores)
    if (!std::isfinite(s)) throw Error("rank_select: non-finite QE score");
  const std::size_t best = argmax_lowest(qe_scores);
  EnsembleSelection sel;
  sel.segment_id = hyps.segment_id;
  sel.method = Method::rank;
  sel.chosen_index = best;
  sel.chosen_text = hyps.text(best);
  sel.score = qe_scores[best];
  for (std::size_t i = 0; i < qe_scores.size(); ++i) sel.diagnostics[indexed_key("qe_score", i)] = qe_scores[i];
  return sel;
}

/// QE scores for every hypothesis through a reference-free scorer.
inline std::vector<double> qe_scores(std::string_view source, const HypothesisSet& hyps,
                                     ScorerHandle& qe) {
  if (qe.needs_reference())
    throw Error("QE scorer '" + qe.name() + "' declares needs_reference; ranking must be reference-free");
  std::vector<ScoreRequest> batch;
  for (std::size_t i = 0; i < hyps.size(); ++i)
    batch.push_back({static_cast<std::int64_t>(i), std::string(source), hyps.text(i), std::nullopt});
  return qe.score_batch(batch);
}

namespace detail {
inline EnsembleSelection oracle_from_scores(const HypothesisSet& hyps, const std::vector<double>& s) {
  const std::size_t best = argmax_lowest(s);
  EnsembleSelection sel;
  sel.segment_id = hyps.segment_id;
  sel.method = Method::oracle;
  sel.chosen_index = best;
  sel.chosen_text = hyps.text(best);
  sel.score = s[best];
  for (std::size_t i = 0; i < s.size(); ++i) sel.diagnostics[indexed_key("oracle_score", i)] = s[i];
  return sel;
}
}  // namespace detail

/// Best hypothesis against the true reference; an upper bound for the set.
inline EnsembleSelection oracle_select(const HypothesisSet& hyps,
                                       const std::optional<std::string>& reference,
                                       std::string_view source, const UtilityFunction& metric) {
  if (!reference) throw Error("oracle selection for '" + hyps.segment_id + "' needs a reference");
  if (hyps.size() == 0) throw Error("hypothesis set '" + hyps.segment_id + "' is empty");
  std::vector<double> s;
  s.reserve(hyps.size());
  for (const auto& h : hyps.hypotheses) s.push_back(metric(source, h.text, *reference));
  return detail::oracle_from_scores(hyps, s);
}

inline EnsembleSelection oracle_select(const HypothesisSet& hyps,
                                       const std::optional<std::string>& reference,
                                       std::string_view source, ScorerHandle& metric) {
  if (!reference) throw Error("oracle selection for '" + hyps.segment_id + "' needs a reference");
  if (hyps.size() == 0) throw Error("hypothesis set '" + hyps.segment_id + "' is empty");
  std::vector<ScoreRequest> batch;
  for (std::size_t i = 0; i < hyps.size(); ++i)
    batch.push_back({static_cast<std::int64_t>(i), std::string(source), hyps.text(i), *reference});
  return detail::oracle_from_scores(hyps, metric.score_batch(batch));
}

struct DiversityResult {
  double value = 0.0;
  std::size_t clamped = 0;  // off-diagonal entries pulled into [0, 1]
};

/// Semantic diversity: 1 - mean of the off-diagonal entries over all ordered
/// pairs i != j. Reads the existing matrix only; no scoring happens here.
inline DiversityResult diversity(const UtilityMatrix& m) {
  const std::size_t n = m.n();
  if (n < 2) throw Error("diversity needs at least two hypotheses");
  DiversityResult r;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double v = m.at(i, j);
      if (v < 0.0 || v > 1.0) {
        v = std::clamp(v, 0.0, 1.0);
        ++r.clamped;
      }
      sum += v;
    }
  r.value = 1.0 - sum / static_cast<double>(n * (n - 1));
  return r;
}

}  // namespace hypens
