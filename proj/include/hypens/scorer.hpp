#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "core.hpp"
#include "metrics.hpp"
#include "transport.hpp"

namespace hypens {

inline constexpr std::string_view scorer_protocol = "scorer/1";
inline constexpr std::string_view langid_protocol = "langid/1";
inline constexpr std::chrono::milliseconds default_handshake_timeout{30000};

struct ScoreRequest {
  std::int64_t id = 0;
  std::string src;
  std::string mt;
  std::optional<std::string> ref;
};

struct ScoreResponse {
  std::int64_t id = 0;
  double score = 0.0;
};

inline std::string encode_request(const ScoreRequest& r) {
  ordered_json j;
  j["id"] = r.id;
  j["src"] = r.src;
  j["mt"] = r.mt;
  if (r.ref)
    j["ref"] = *r.ref;
  else
    j["ref"] = nullptr;
  return j.dump();
}

inline ScoreRequest decode_request(std::string_view line) {
  json j = json::parse(line);
  ScoreRequest r;
  r.id = j.at("id").get<std::int64_t>();
  r.src = j.at("src").get<std::string>();
  r.mt = j.at("mt").get<std::string>();
  if (auto it = j.find("ref"); it != j.end() && !it->is_null()) r.ref = it->get<std::string>();
  return r;
}

inline std::string encode_response(const ScoreResponse& r) {
  ordered_json j;
  j["id"] = r.id;
  j["score"] = r.score;
  return j.dump();
}

/// Client for an out-of-process scorer speaking scorer/1.
///
/// Handles are safe to share between threads: a batch holds the I/O lock
/// for its whole round trip, and the memo table has its own lock.
class ScorerHandle {
 public:
  struct Options {
    std::chrono::milliseconds handshake_timeout = default_handshake_timeout;
    std::chrono::milliseconds response_timeout{60000};
  };

  static std::unique_ptr<ScorerHandle> connect(std::unique_ptr<LineChannel> channel,
                                               Options opts) {
    auto line = channel->read_line(opts.handshake_timeout);
    if (!line) throw TimeoutError("scorer handshake timed out");
    json hs;
    try {
      hs = json::parse(*line);
    } catch (const json::exception& e) {
      throw ProtocolError(std::string("malformed scorer handshake: ") + e.what());
    }
    if (!hs.is_object() || !hs.contains("protocol") || !hs["protocol"].is_string())
      throw ProtocolError("scorer handshake lacks a protocol field");
    const auto proto = hs["protocol"].get<std::string>();
    if (proto != scorer_protocol)
      throw ProtocolError("scorer protocol mismatch: expected " + std::string(scorer_protocol) +
                          ", got " + proto);
    std::string name = hs.value("name", std::string{});
    if (name.empty()) throw ProtocolError("scorer handshake lacks a name");
    if (!hs.contains("needs_reference") || !hs["needs_reference"].is_boolean())
      throw ProtocolError("scorer handshake lacks needs_reference");
    return std::unique_ptr<ScorerHandle>(
        new ScorerHandle(std::move(channel), std::move(name), hs["needs_reference"].get<bool>(), opts));
  }

  static std::unique_ptr<ScorerHandle> connect(std::unique_ptr<LineChannel> channel) {
    return connect(std::move(channel), Options{});
  }

  const std::string& name() const noexcept { return name_; }
  bool needs_reference() const noexcept { return needs_reference_; }

  /// Request lines actually written to the wire over the handle's lifetime.
  std::size_t wire_requests() const noexcept { return wire_requests_.load(); }

  void clear_cache() {
    std::lock_guard lock(cache_mu_);
    cache_.clear();
  }

  /// Scores a batch; the result is aligned to `requests`. Request ids must be
  /// unique within the batch. Triples seen before (in this batch or earlier)
  /// are answered from the memo table without touching the wire.
  std::vector<double> score_batch(std::span<const ScoreRequest> requests) {
    std::vector<double> out(requests.size());
    if (requests.empty()) return out;

    std::unordered_set<std::int64_t> ids;
    for (const auto& r : requests) {
      if (!ids.insert(r.id).second)
        throw Error("duplicate request id " + std::to_string(r.id) + " in batch");
      if (needs_reference_ && !r.ref)
        throw Error("scorer '" + name_ + "' needs a reference (request id " +
                    std::to_string(r.id) + ")");
    }

    // key -> positions awaiting it
    std::unordered_map<std::string, std::vector<std::size_t>> misses;
    std::vector<std::string> miss_order;
    {
      std::lock_guard lock(cache_mu_);
      for (std::size_t i = 0; i < requests.size(); ++i) {
        std::string key = cache_key(requests[i]);
        if (auto it = cache_.find(key); it != cache_.end()) {
          out[i] = it->second;
          continue;
        }
        auto [slot, inserted] = misses.try_emplace(key);
        if (inserted) miss_order.push_back(key);
        slot->second.push_back(i);
      }
    }
    if (miss_order.empty()) return out;

    std::lock_guard io(io_mu_);
    std::unordered_map<std::int64_t, const std::string*> outstanding;
    outstanding.reserve(miss_order.size());
    for (const auto& key : miss_order) {
      const ScoreRequest& first = requests[misses[key].front()];
      ScoreRequest wire = first;
      wire.id = next_wire_id_++;
      channel_->write_line(encode_request(wire));
      outstanding.emplace(wire.id, &key);
      ++wire_requests_;
    }
    channel_->flush();

    std::vector<std::pair<const std::string*, double>> answered;
    answered.reserve(outstanding.size());
    while (!outstanding.empty()) {
      auto line = channel_->read_line(opts_.response_timeout);
      if (!line)
        throw TimeoutError("scorer '" + name_ + "' left " + std::to_string(outstanding.size()) +
                           " request(s) unanswered after timeout");
      ScoreResponse resp = parse_response(*line);
      auto it = outstanding.find(resp.id);
      if (it == outstanding.end())
        throw ProtocolError("scorer '" + name_ + "' answered unknown id " + std::to_string(resp.id));
      answered.emplace_back(it->second, resp.score);
      outstanding.erase(it);
    }

    std::lock_guard lock(cache_mu_);
    for (const auto& [key, score] : answered) {
      cache_[*key] = score;
      for (std::size_t pos : misses[*key]) out[pos] = score;
    }
    return out;
  }

  /// Convenience for a single triple.
  double score(std::string_view src, std::string_view mt, std::optional<std::string_view> ref) {
    ScoreRequest r{0, std::string(src), std::string(mt),
                   ref ? std::optional<std::string>(std::string(*ref)) : std::nullopt};
    return score_batch(std::span<const ScoreRequest>(&r, 1)).front();
  }

 private:
  ScorerHandle(std::unique_ptr<LineChannel> ch, std::string name, bool needs_ref, Options opts)
      : channel_(std::move(ch)), name_(std::move(name)), needs_reference_(needs_ref), opts_(opts) {}

  std::string cache_key(const ScoreRequest& r) const {
    std::string k;
    auto field = [&k](std::string_view v) {
      k += std::to_string(v.size());
      k.push_back(':');
      k += v;
    };
    field(name_);
    field(r.src);
    field(r.mt);
    if (r.ref)
      field(*r.ref);
    else
      k.push_back('-');
    return k;
  }

  ScoreResponse parse_response(const std::string& line) const {
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ProtocolError("scorer '" + name_ + "' sent malformed line: " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_number_integer())
      throw ProtocolError("scorer '" + name_ + "' response lacks an integer id");
    if (!j.contains("score") || !j["score"].is_number())
      throw ProtocolError("scorer '" + name_ + "' response lacks a numeric score");
    ScoreResponse r{j["id"].get<std::int64_t>(), j["score"].get<double>()};
    if (!std::isfinite(r.score))
      throw ProtocolError("scorer '" + name_ + "' returned a non-finite score for id " +
                          std::to_string(r.id));
    return r;
  }

  std::unique_ptr<LineChannel> channel_;
  std::string name_;
  bool needs_reference_;
  Options opts_;
  std::mutex io_mu_;
  std::mutex cache_mu_;
  std::unordered_map<std::string, double> cache_;
  std::int64_t next_wire_id_ = 0;
  std::atomic<std::size_t> wire_requests_{0};
};

/// In-process scorer/1 service backed by a plain function. Ships for tests
/// and offline runs; counts the request lines it receives.
class StubScorerService final : public LineService {
 public:
  using Fn = std::function<double(const std::string& src, const std::string& mt,
                                  const std::optional<std::string>& ref)>;

  struct Options {
    std::string name = "stub";
    bool needs_reference = true;
    std::string protocol = std::string(scorer_protocol);
    bool reply_in_reverse = false;  // hold replies until drained, then send newest first
    bool drop_replies = false;
  };

  StubScorerService(Options opts, Fn fn) : opts_(std::move(opts)), fn_(std::move(fn)) {}

  void greet(const Emit& emit) override {
    ordered_json hs;
    hs["protocol"] = opts_.protocol;
    hs["name"] = opts_.name;
    hs["needs_reference"] = opts_.needs_reference;
    emit(hs.dump());
  }

  void on_line(std::string_view line, const Emit& emit) override {
    ++calls_;
    ScoreRequest r = decode_request(line);
    std::string reply = reply_for(r);
    if (opts_.drop_replies) return;
    if (opts_.reply_in_reverse)
      held_.push_back(std::move(reply));
    else
      emit(std::move(reply));
  }

  void on_drain(const Emit& emit) override {
    for (auto it = held_.rbegin(); it != held_.rend(); ++it) emit(std::move(*it));
    held_.clear();
  }

  std::size_t calls() const noexcept { return calls_.load(); }

 private:
  std::string reply_for(const ScoreRequest& r) const {
    double s = fn_(r.src, r.mt, r.ref);
    // nlohmann serializes non-finite doubles as null; keep the raw token so
    // the client sees what a broken scorer would send.
    if (!std::isfinite(s)) return "{\"id\":" + std::to_string(r.id) + ",\"score\":1e999}";
    return encode_response({r.id, s});
  }

  Options opts_;
  Fn fn_;
  std::vector<std::string> held_;
  std::atomic<std::size_t> calls_{0};
};

/// Wraps a UtilityFunction as an in-process scorer/1 endpoint.
inline std::shared_ptr<StubScorerService> make_utility_stub(const UtilityFunction& u,
                                                            StubScorerService::Options opts = {}) {
  if (opts.name == "stub") opts.name = u.name();
  opts.needs_reference = u.needs_reference();
  return std::make_shared<StubScorerService>(
      std::move(opts), [u](const std::string& src, const std::string& mt,
                           const std::optional<std::string>& ref) {
        return u(src, mt, ref ? std::string_view(*ref) : std::string_view{});
      });
}

// ---------------------------------------------------------------------------
// Language identification (langid/1)

/// Client for a language identifier speaking langid/1.
class LangIdHandle {
 public:
  static std::unique_ptr<LangIdHandle> connect(
      std::unique_ptr<LineChannel> channel,
      std::chrono::milliseconds timeout = default_handshake_timeout) {
    auto line = channel->read_line(timeout);
    if (!line) throw TimeoutError("langid handshake timed out");
    json hs;
    try {
      hs = json::parse(*line);
    } catch (const json::exception& e) {
      throw ProtocolError(std::string("malformed langid handshake: ") + e.what());
    }
    if (!hs.is_object() || hs.value("protocol", std::string{}) != langid_protocol)
      throw ProtocolError("langid protocol mismatch: expected " + std::string(langid_protocol));
    return std::unique_ptr<LangIdHandle>(
        new LangIdHandle(std::move(channel), hs.value("name", std::string{"langid"}), timeout));
  }

  const std::string& name() const noexcept { return name_; }

  /// Language code per text, aligned to the input order.
  std::vector<std::string> identify(std::span<const std::string> texts) {
    std::vector<std::string> out(texts.size());
    if (texts.empty()) return out;
    std::lock_guard io(mu_);
    std::unordered_map<std::int64_t, std::size_t> outstanding;
    for (std::size_t i = 0; i < texts.size(); ++i) {
      ordered_json j;
      j["id"] = next_id_;
      j["text"] = texts[i];
      channel_->write_line(j.dump());
      outstanding.emplace(next_id_++, i);
    }
    channel_->flush();
    while (!outstanding.empty()) {
      auto line = channel_->read_line(timeout_);
      if (!line) throw TimeoutError("langid '" + name_ + "' timed out");
      json j;
      try {
        j = json::parse(*line);
      } catch (const json::exception& e) {
        throw ProtocolError(std::string("malformed langid response: ") + e.what());
      }
      if (!j.is_object() || !j.contains("id") || !j["id"].is_number_integer() ||
          !j.contains("lang") || !j["lang"].is_string())
        throw ProtocolError("langid response needs integer id and string lang");
      auto it = outstanding.find(j["id"].get<std::int64_t>());
      if (it == outstanding.end()) throw ProtocolError("langid answered unknown id");
      out[it->second] = j["lang"].get<std::string>();
      outstanding.erase(it);
    }
    return out;
  }

 private:
  LangIdHandle(std::unique_ptr<LineChannel> ch, std::string name, std::chrono::milliseconds t)
      : channel_(std::move(ch)), name_(std::move(name)), timeout_(t) {}

  std::unique_ptr<LineChannel> channel_;
  std::string name_;
  std::chrono::milliseconds timeout_;
  std::mutex mu_;
  std::int64_t next_id_ = 0;
};

/// Test-only identifier: labels text by the majority script of its letters
/// (Latin vs Cyrillic). Not a language identifier in any real sense.
class ScriptLangIdService final : public LineService {
 public:
  ScriptLangIdService(std::string latin_code, std::string cyrillic_code)
      : latin_(std::move(latin_code)), cyrillic_(std::move(cyrillic_code)) {}

  void greet(const Emit& emit) override {
    emit(R"({"protocol":"langid/1","name":"script-stub"})");
  }

  void on_line(std::string_view line, const Emit& emit) override {
    json j = json::parse(line);
    ordered_json r;
    r["id"] = j.at("id");
    r["lang"] = classify(j.at("text").get<std::string>());
    emit(r.dump());
  }

  std::string classify(std::string_view text) const {
    std::size_t latin = 0, cyr = 0;
    for (char32_t c : unicode::decode_utf8(text)) {
      if ((c >= U'a' && c <= U'z') || (c >= U'A' && c <= U'Z') || (c >= 0xC0 && c <= 0x24F))
        ++latin;
      else if (c >= 0x400 && c <= 0x4FF)
        ++cyr;
    }
    if (latin == 0 && cyr == 0) return "und";
    return cyr > latin ? cyrillic_ : latin_;
  }

 private:
  std::string latin_;
  std::string cyrillic_;
};

}  // namespace hypens
