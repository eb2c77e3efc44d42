#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <unistd.h>

#include "json.hpp"
#include "unicode.hpp"

namespace hypens {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A corpus record that failed validation. `line()` is 1-based.
class ParseError : public Error {
 public:
  ParseError(std::string path, std::size_t line, const std::string& what)
      : Error(path + ":" + std::to_string(line) + ": " + what),
        path_(std::move(path)),
        line_(line) {}

  const std::string& path() const noexcept { return path_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string path_;
  std::size_t line_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

struct SourceSegment {
  std::string id;
  std::string src_lang;
  std::string tgt_lang;
  std::string text;
  std::optional<std::string> reference;

  bool operator==(const SourceSegment&) const = default;
};

struct Hypothesis {
  std::string text;
  std::string template_id;
  double temperature = 1.0;
  double top_p = 1.0;
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;

  bool operator==(const Hypothesis&) const = default;
};

/// Candidates for one segment, in generation order. Index i always denotes
/// the same string across every module.
struct HypothesisSet {
  std::string segment_id;
  std::vector<Hypothesis> hypotheses;

  std::size_t size() const noexcept { return hypotheses.size(); }
  const std::string& text(std::size_t i) const { return hypotheses.at(i).text; }
  std::vector<std::string> texts() const {
    std::vector<std::string> out;
    out.reserve(hypotheses.size());
    for (const auto& h : hypotheses) out.push_back(h.text);
    return out;
  }

  bool operator==(const HypothesisSet&) const = default;
};

enum class Method { greedy, sample, mbr, rank, oracle, choose_best, generate_best };

inline constexpr std::array<std::pair<Method, std::string_view>, 7> method_names{{
    {Method::greedy, "greedy"},
    {Method::sample, "sample"},
    {Method::mbr, "mbr"},
    {Method::rank, "rank"},
    {Method::oracle, "oracle"},
    {Method::choose_best, "choose_best"},
    {Method::generate_best, "generate_best"},
}};

inline std::string_view to_string(Method m) {
  for (const auto& [k, v] : method_names)
    if (k == m) return v;
  throw Error("unknown method enum value");
}

inline Method parse_method(std::string_view s) {
  for (const auto& [k, v] : method_names)
    if (v == s) return k;
  throw Error("unknown method '" + std::string(s) + "'");
}

struct EnsembleSelection {
  std::string segment_id;
  Method method = Method::mbr;
  std::optional<std::size_t> chosen_index;  // absent for generate_best
  std::string chosen_text;
  std::optional<double> score;
  std::map<std::string, double> diagnostics;

  bool operator==(const EnsembleSelection&) const = default;
};

/// Provenance appended to every line of CLI outputs.
struct RunStamp {
  std::string config_hash;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Atomic file output

/// Writes to a temporary sibling and renames over `path` once `body` returns.
/// If `body` throws, the temporary is removed and `path` is left untouched.
inline void atomic_write(const std::filesystem::path& path,
                         const std::function<void(std::ostream&)>& body) {
  namespace fs = std::filesystem;
  fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  if (!fs::is_directory(dir)) throw IoError("output directory does not exist: " + dir.string());
  fs::path tmp = dir / ("." + path.filename().string() + ".tmp." + std::to_string(::getpid()));
  try {
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
      body(out);
      out.flush();
      if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("rename to " + path.string() + " failed: " + ec.message());
  } catch (...) {
    std::error_code ignore;
    fs::remove(tmp, ignore);
    throw;
  }
}

inline void atomic_write_lines(const std::filesystem::path& path,
                               const std::vector<std::string>& lines) {
  atomic_write(path, [&](std::ostream& os) {
    for (const auto& l : lines) os << l << '\n';
  });
}

// ---------------------------------------------------------------------------
// JSONL reading

namespace detail {

/// Calls `fn(line_number, object)` for every line of a JSONL file. Blank
/// trailing lines are tolerated; every other line must be a JSON object.
template <typename Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (unicode::trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(path.string(), lineno, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(path.string(), lineno, "line is not a JSON object");
    try {
      fn(lineno, obj);
    } catch (const ParseError&) {
      throw;
    } catch (const json::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    } catch (const Error& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
  }
  if (in.bad()) throw IoError("read failed: " + path.string());
}

inline const json& require(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) throw Error(std::string("missing required field '") + key + "'");
  return *it;
}

inline std::string require_string(const json& obj, const char* key) {
  const json& v = require(obj, key);
  if (!v.is_string()) throw Error(std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

inline double require_number(const json& obj, const char* key) {
  const json& v = require(obj, key);
  if (!v.is_number()) throw Error(std::string("field '") + key + "' must be a number");
  return v.get<double>();
}

inline std::int64_t require_count(const json& obj, const char* key) {
  const json& v = require(obj, key);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
    throw Error(std::string("field '") + key + "' must be a non-negative integer");
  return v.get<std::int64_t>();
}

inline void append_stamp(ordered_json& j, const std::optional<RunStamp>& stamp) {
  if (!stamp) return;
  ordered_json run;
  run["config_hash"] = stamp->config_hash;
  run["seed"] = stamp->seed;
  j["run"] = std::move(run);
}

}  // namespace detail

inline void validate(const SourceSegment& s) {
  if (s.id.empty()) throw Error("segment id is empty");
  if (s.src_lang.empty() || s.tgt_lang.empty()) throw Error("language code is empty");
  if (s.src_lang == s.tgt_lang) throw Error("src_lang equals tgt_lang ('" + s.src_lang + "')");
  if (unicode::trim(s.text).empty()) throw Error("segment text is blank");
}

inline void validate(const Hypothesis& h) {
  if (!(h.temperature >= 0.0) || !std::isfinite(h.temperature))
    throw Error("hypothesis temperature must be a finite value >= 0");
  if (!(h.top_p > 0.0 && h.top_p <= 1.0)) throw Error("hypothesis top_p must lie in (0, 1]");
  if (h.prompt_tokens < 0 || h.completion_tokens < 0) throw Error("token counts must be >= 0");
}

inline SourceSegment segment_from_json(const json& obj) {
  SourceSegment s;
  s.id = detail::require_string(obj, "id");
  s.src_lang = detail::require_string(obj, "src_lang");
  s.tgt_lang = detail::require_string(obj, "tgt_lang");
  s.text = detail::require_string(obj, "text");
  if (auto it = obj.find("reference"); it != obj.end() && !it->is_null()) {
    if (!it->is_string()) throw Error("field 'reference' must be a string");
    s.reference = it->get<std::string>();
  }
  validate(s);
  return s;
}

inline ordered_json to_json(const SourceSegment& s) {
  ordered_json j;
  j["id"] = s.id;
  j["src_lang"] = s.src_lang;
  j["tgt_lang"] = s.tgt_lang;
  j["text"] = s.text;
  if (s.reference) j["reference"] = *s.reference;
  return j;
}

inline Hypothesis hypothesis_from_json(const json& obj) {
  Hypothesis h;
  h.text = detail::require_string(obj, "text");
  h.template_id = obj.contains("template_id") ? detail::require_string(obj, "template_id") : "";
  h.temperature = detail::require_number(obj, "temperature");
  h.top_p = detail::require_number(obj, "top_p");
  h.prompt_tokens = detail::require_count(obj, "prompt_tokens");
  h.completion_tokens = detail::require_count(obj, "completion_tokens");
  validate(h);
  return h;
}

inline ordered_json to_json(const Hypothesis& h) {
  ordered_json j;
  j["text"] = h.text;
  j["template_id"] = h.template_id;
  j["temperature"] = h.temperature;
  j["top_p"] = h.top_p;
  j["prompt_tokens"] = h.prompt_tokens;
  j["completion_tokens"] = h.completion_tokens;
  return j;
}

inline HypothesisSet hypothesis_set_from_json(const json& obj) {
  HypothesisSet set;
  set.segment_id = detail::require_string(obj, "segment_id");
  if (set.segment_id.empty()) throw Error("segment_id is empty");
  const json& arr = detail::require(obj, "hypotheses");
  if (!arr.is_array()) throw Error("field 'hypotheses' must be an array");
  if (arr.empty()) throw Error("hypothesis array is empty");
  for (const auto& h : arr) {
    if (!h.is_object()) throw Error("hypothesis entry must be an object");
    set.hypotheses.push_back(hypothesis_from_json(h));
  }
  return set;
}

inline ordered_json to_json(const HypothesisSet& set) {
  ordered_json j;
  j["segment_id"] = set.segment_id;
  ordered_json arr = ordered_json::array();
  for (const auto& h : set.hypotheses) arr.push_back(to_json(h));
  j["hypotheses"] = std::move(arr);
  return j;
}

/// Field order is fixed: segment_id, method, chosen_index, chosen_text,
/// score, diagnostics. Absent optionals serialize as null.
inline ordered_json to_json(const EnsembleSelection& s) {
  ordered_json j;
  j["segment_id"] = s.segment_id;
  j["method"] = std::string(to_string(s.method));
  if (s.chosen_index)
    j["chosen_index"] = *s.chosen_index;
  else
    j["chosen_index"] = nullptr;
  j["chosen_text"] = s.chosen_text;
  if (s.score)
    j["score"] = *s.score;
  else
    j["score"] = nullptr;
  ordered_json diag = ordered_json::object();
  for (const auto& [k, v] : s.diagnostics) diag[k] = v;
  j["diagnostics"] = std::move(diag);
  return j;
}

inline EnsembleSelection selection_from_json(const json& obj) {
  EnsembleSelection s;
  s.segment_id = detail::require_string(obj, "segment_id");
  s.method = parse_method(detail::require_string(obj, "method"));
  if (auto it = obj.find("chosen_index"); it != obj.end() && !it->is_null()) {
    if (!it->is_number_integer() || it->get<std::int64_t>() < 0)
      throw Error("chosen_index must be a non-negative integer");
    s.chosen_index = it->get<std::size_t>();
  }
  s.chosen_text = detail::require_string(obj, "chosen_text");
  if (auto it = obj.find("score"); it != obj.end() && !it->is_null()) s.score = it->get<double>();
  if (auto it = obj.find("diagnostics"); it != obj.end() && !it->is_null()) {
    if (!it->is_object()) throw Error("diagnostics must be an object");
    for (const auto& [k, v] : it->items()) s.diagnostics[k] = v.get<double>();
  }
  return s;
}

// ---------------------------------------------------------------------------
// Corpus I/O

/// Loads a source corpus. Any malformed line, missing field or duplicate id
/// rejects the whole file with the offending line number.
inline std::vector<SourceSegment> load_segments(const std::filesystem::path& path) {
  std::vector<SourceSegment> out;
  std::unordered_set<std::string> seen;
  detail::for_each_jsonl(path, [&](std::size_t lineno, const json& obj) {
    SourceSegment s = segment_from_json(obj);
    if (!seen.insert(s.id).second)
      throw ParseError(path.string(), lineno, "duplicate segment id '" + s.id + "'");
    out.push_back(std::move(s));
  });
  return out;
}

inline std::vector<HypothesisSet> load_hypothesis_sets(const std::filesystem::path& path) {
  std::vector<HypothesisSet> out;
  detail::for_each_jsonl(path, [&](std::size_t, const json& obj) {
    out.push_back(hypothesis_set_from_json(obj));
  });
  return out;
}

inline std::vector<EnsembleSelection> load_selections(const std::filesystem::path& path) {
  std::vector<EnsembleSelection> out;
  detail::for_each_jsonl(path, [&](std::size_t, const json& obj) {
    out.push_back(selection_from_json(obj));
  });
  return out;
}

inline void write_segments(const std::filesystem::path& path,
                           const std::vector<SourceSegment>& segments) {
  atomic_write(path, [&](std::ostream& os) {
    for (const auto& s : segments) os << to_json(s).dump() << '\n';
  });
}

inline void write_hypothesis_sets(const std::filesystem::path& path,
                                  const std::vector<HypothesisSet>& sets,
                                  const std::optional<RunStamp>& stamp = std::nullopt) {
  atomic_write(path, [&](std::ostream& os) {
    for (const auto& s : sets) {
      auto j = to_json(s);
      detail::append_stamp(j, stamp);
      os << j.dump() << '\n';
    }
  });
}

inline void write_selections(const std::filesystem::path& path,
                             const std::vector<EnsembleSelection>& selections,
                             const std::optional<RunStamp>& stamp = std::nullopt) {
  atomic_write(path, [&](std::ostream& os) {
    for (const auto& s : selections) {
      auto j = to_json(s);
      detail::append_stamp(j, stamp);
      os << j.dump() << '\n';
    }
  });
}

}  // namespace hypens
