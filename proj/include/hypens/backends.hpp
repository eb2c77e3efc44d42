#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <thread>

#include "httplib.h"

#include "genkit.hpp"
#include "metrics.hpp"
#include "mixer.hpp"

namespace hypens {

/// JSON-over-HTTP completion endpoint:
///   POST {prompt, n, temperature, top_p, max_tokens, stop}
///   ->   {choices:[{text, completion_tokens}], prompt_tokens}
/// A bearer token is read from the environment variable named by
/// `api_key_env` when set. Transport errors, 429 and 5xx are retried with
/// bounded exponential backoff.
class HttpBackend final : public CompletionBackend {
 public:
  struct Options {
    std::string api_key_env = "HYPENS_API_KEY";
    int max_retries = 3;
    std::chrono::milliseconds initial_backoff{250};
    std::chrono::seconds timeout{120};
  };

  explicit HttpBackend(const std::string& url) : HttpBackend(url, Options{}) {}

  HttpBackend(const std::string& url, Options opts) : opts_(std::move(opts)) {
    if (!url.starts_with("http://")) throw Error("HTTP backend URL must start with http://");
    std::string_view rest = std::string_view(url).substr(7);
    auto slash = rest.find('/');
    base_ = "http://" + std::string(rest.substr(0, slash));
    path_ = slash == std::string_view::npos ? "/" : std::string(rest.substr(slash));
  }

  CompletionResponse complete(const CompletionRequest& req) override {
    httplib::Client cli(base_);
    cli.set_read_timeout(opts_.timeout);
    cli.set_write_timeout(opts_.timeout);
    httplib::Headers headers;
    if (const char* key = std::getenv(opts_.api_key_env.c_str()); key && *key)
      headers.emplace("Authorization", std::string("Bearer ") + key);
    const std::string body = to_json(req).dump();

    auto backoff = opts_.initial_backoff;
    std::string last_error;
    for (int attempt = 0; attempt <= opts_.max_retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
      auto res = cli.Post(path_, headers, body, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) throw Error("completion backend returned HTTP " + std::to_string(res->status));
      try {
        return completion_response_from_json(json::parse(res->body));
      } catch (const json::exception& e) {
        throw Error(std::string("malformed completion response: ") + e.what());
      }
    }
    throw Error("completion backend " + base_ + path_ + " failed after retries: " + last_error);
  }

 private:
  Options opts_;
  std::string base_;
  std::string path_;
};

namespace detail {

inline std::int64_t count_tokens(std::string_view s) {
  return static_cast<std::int64_t>(tokenize(s).size());
}

/// Canned replies for ChooseBest/GenerateBest prompts so stub backends can
/// drive every ensembling method offline.
inline std::optional<std::string> stub_selection_reply(std::string_view prompt, std::uint64_t seed) {
  if (prompt.ends_with("Correct answer: Option")) {
    std::size_t options = 0;
    for (std::size_t p = prompt.find("\nOption "); p != std::string_view::npos;
         p = prompt.find("\nOption ", p + 1))
      ++options;
    if (options == 0) return std::nullopt;
    const auto pick = mix64(seed, fnv1a64(prompt)) % options;
    return std::string(" ") + static_cast<char>('A' + pick) + ".";
  }
  constexpr std::string_view head = "\nTranslation hypotheses:\n";
  if (prompt.ends_with("\nBest possible translation:")) {
    auto p = prompt.find(head);
    if (p == std::string_view::npos) return std::nullopt;
    auto first = prompt.substr(p + head.size());
    return " " + std::string(first.substr(0, first.find('\n')));
  }
  return std::nullopt;
}

}  // namespace detail

/// Returns the prompt itself as every completion.
class EchoBackend final : public CompletionBackend {
 public:
  CompletionResponse complete(const CompletionRequest& req) override {
    ++calls_;
    CompletionResponse r;
    r.prompt_tokens = detail::count_tokens(req.prompt);
    for (int i = 0; i < req.n; ++i) r.choices.push_back({req.prompt, detail::count_tokens(req.prompt)});
    return r;
  }
  std::size_t calls() const noexcept { return calls_; }

 private:
  std::atomic<std::size_t> calls_{0};
};

/// Returns a fixed text with fixed token counts; `max_choices` caps the
/// number of completions to simulate short responses.
class FixedBackend final : public CompletionBackend {
 public:
  FixedBackend(std::string text, std::int64_t prompt_tokens, std::int64_t completion_tokens,
               std::optional<int> max_choices = std::nullopt)
      : text_(std::move(text)),
        prompt_tokens_(prompt_tokens),
        completion_tokens_(completion_tokens),
        max_choices_(max_choices) {}

  CompletionResponse complete(const CompletionRequest& req) override {
    last_request_ = req;
    CompletionResponse r;
    r.prompt_tokens = prompt_tokens_;
    const int k = max_choices_ ? std::min(*max_choices_, req.n) : req.n;
    for (int i = 0; i < k; ++i) r.choices.push_back({text_, completion_tokens_});
    return r;
  }

  const std::optional<CompletionRequest>& last_request() const noexcept { return last_request_; }

 private:
  std::string text_;
  std::int64_t prompt_tokens_;
  std::int64_t completion_tokens_;
  std::optional<int> max_choices_;
  std::optional<CompletionRequest> last_request_;
};

/// Synthetic translator: each completion is a noisy copy of a hidden target
/// looked up from the prompt. Every word position draws one uniform number
/// per (seed, prompt, sample index, position), independent of temperature,
/// and is corrupted when that number falls below
///     rate = min(1, noise_scale * temperature * top_p).
/// Raising the temperature therefore only adds corrupted positions, which
/// makes hypothesis diversity grow with temperature. Temperature 0 returns
/// exact copies.
class NoisyCopyBackend final : public CompletionBackend {
 public:
  using TargetLookup = std::function<std::optional<std::string>(std::string_view prompt)>;

  NoisyCopyBackend(std::uint64_t seed, TargetLookup lookup, double noise_scale = 0.35)
      : seed_(seed), lookup_(std::move(lookup)), noise_scale_(noise_scale) {}

  CompletionResponse complete(const CompletionRequest& req) override {
    CompletionResponse r;
    r.prompt_tokens = detail::count_tokens(req.prompt);
    if (auto canned = detail::stub_selection_reply(req.prompt, seed_)) {
      for (int i = 0; i < req.n; ++i) r.choices.push_back({*canned, detail::count_tokens(*canned)});
      return r;
    }
    auto target = lookup_(req.prompt);
    if (!target) throw Error("noisy stub backend has no target for this prompt");
    const auto words = detail::tokenize(*target);
    const double rate = std::min(1.0, noise_scale_ * req.temperature * req.top_p);
    const std::uint64_t base = mix64(seed_, fnv1a64(req.prompt));
    for (int k = 0; k < req.n; ++k) {
      std::string text = corrupt(words, mix64(base, static_cast<std::uint64_t>(k)), rate);
      r.choices.push_back({text, std::max<std::int64_t>(1, detail::count_tokens(text))});
    }
    return r;
  }

  static std::string corrupt(const std::vector<std::string>& words, std::uint64_t stream, double rate) {
    std::string out;
    auto emit = [&](std::string_view w) {
      if (!out.empty()) out.push_back(' ');
      out.append(w);
    };
    for (std::size_t p = 0; p < words.size(); ++p) {
      const std::uint64_t r = mix64(stream, p);
      if (unit_interval(r) >= rate) {
        emit(words[p]);
        continue;
      }
      const std::uint64_t c = mix64(r, 0xC0FFEEULL);
      const char letter = static_cast<char>('a' + (c >> 8) % 26);
      switch (c % 3) {
        case 0:  // drop
          break;
        case 1: {  // overwrite one byte-sized character, or append for non-ASCII words
          std::string w = words[p];
          const std::size_t at = (c >> 16) % w.size();
          if (static_cast<unsigned char>(w[at]) < 0x80)
            w[at] = letter;
          else
            w.push_back(letter);
          emit(w);
          break;
        }
        default:  // insert a junk token
          emit(std::string("q") + letter + letter);
          emit(words[p]);
          break;
      }
    }
    if (out.empty() && !words.empty()) out = words.front();
    return out;
  }

 private:
  std::uint64_t seed_;
  TargetLookup lookup_;
  double noise_scale_;
};

}  // namespace hypens
