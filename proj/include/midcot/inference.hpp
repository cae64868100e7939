// Copyright 2026 The midcot Authors
// SPDX-License-Identifier: Apache-2.0
//
// Client for OpenAI-compatible inference servers, plus an offline replay
// backend that serves recorded responses keyed by request hash.
//
// Wire subset used:
//   POST <base>/v1/chat/completions  {model, messages, max_tokens, temperature, logprobs}
//   POST <base>/v1/completions       {model, prompt, max_tokens, temperature, echo, logprobs}
// Log-probabilities are natural-log on the wire and in every struct here.

#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "midcot/dataset.hpp"
#include "midcot/error.hpp"
#include "midcot/hash.hpp"
#include "midcot/log.hpp"
#include "midcot/metrics.hpp"
#include "midcot/parallel.hpp"

namespace midcot {

struct GenRequest {
  std::string model;
  std::string prompt;
  std::uint64_t max_tokens = 16384;
  double temperature = 0.0;
  bool want_logprobs = false;
};

enum class FinishReason { Stop, Length, Error };

constexpr std::string_view to_string(FinishReason f) noexcept {
  switch (f) {
    case FinishReason::Stop: return "stop";
    case FinishReason::Length: return "length";
    case FinishReason::Error: return "error";
  }
  return "?";
}

struct GenResponse {
  std::string text;
  std::optional<std::vector<TokenLogprob>> token_logprobs;
  std::uint64_t completion_tokens = 0;
  FinishReason finish_reason = FinishReason::Stop;
  int attempts = 0;
  std::string error;

  /// Equality over the recorded payload (attempt count and error text excluded).
  bool same_payload(const GenResponse& o) const {
    return text == o.text && token_logprobs == o.token_logprobs &&
           completion_tokens == o.completion_tokens && finish_reason == o.finish_reason;
  }
};

/// Cache key of a generation request: SHA-256 over its canonical JSON.
inline std::string request_hash(const GenRequest& r) {
  const nlohmann::json key = {{"kind", "generate"},
                              {"model", r.model},
                              {"prompt", r.prompt},
                              {"max_tokens", r.max_tokens},
                              {"temperature", r.temperature},
                              {"want_logprobs", r.want_logprobs}};
  return sha256_hex(key.dump());
}

inline std::string score_hash(const std::string& model, const std::string& text, const std::string& context) {
  const nlohmann::json key = {{"kind", "score"}, {"model", model}, {"text", text}, {"context", context}};
  return sha256_hex(key.dump());
}

inline nlohmann::ordered_json to_json(const GenRequest& r) {
  nlohmann::ordered_json j;
  j["model"] = r.model;
  j["prompt"] = r.prompt;
  j["max_tokens"] = r.max_tokens;
  j["temperature"] = r.temperature;
  j["want_logprobs"] = r.want_logprobs;
  return j;
}

inline nlohmann::ordered_json logprobs_to_json(const std::vector<TokenLogprob>& entries) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    nlohmann::ordered_json j;
    j["token"] = e.token;
    j["logprob"] = e.logprob ? nlohmann::ordered_json(*e.logprob) : nlohmann::ordered_json(nullptr);
    arr.push_back(std::move(j));
  }
  return arr;
}

inline std::vector<TokenLogprob> logprobs_from_json(const nlohmann::json& arr, const std::string& where) {
  if (!arr.is_array()) throw DataError(where + ": token_logprobs must be a list");
  std::vector<TokenLogprob> out;
  for (const auto& e : arr) {
    if (!e.is_object() || !e.contains("token") || !e["token"].is_string()) {
      throw DataError(where + ": logprob entry needs a string 'token'");
    }
    TokenLogprob t{e["token"].get<std::string>(), std::nullopt};
    if (e.contains("logprob") && !e["logprob"].is_null()) {
      if (!e["logprob"].is_number()) throw DataError(where + ": logprob must be a number or null");
      t.logprob = e["logprob"].get<double>();
    }
    out.push_back(std::move(t));
  }
  return out;
}

inline nlohmann::ordered_json to_json(const GenResponse& r) {
  nlohmann::ordered_json j;
  j["text"] = r.text;
  if (r.token_logprobs) j["token_logprobs"] = logprobs_to_json(*r.token_logprobs);
  j["completion_tokens"] = r.completion_tokens;
  j["finish_reason"] = std::string(to_string(r.finish_reason));
  return j;
}

inline GenResponse response_from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw DataError(where + ": response must be an object");
  GenResponse r;
  if (!j.contains("text") || !j["text"].is_string()) throw DataError(where + ": response.text missing");
  r.text = j["text"].get<std::string>();
  if (j.contains("token_logprobs") && !j["token_logprobs"].is_null()) {
    r.token_logprobs = logprobs_from_json(j["token_logprobs"], where);
  }
  if (!j.contains("completion_tokens") || !j["completion_tokens"].is_number_unsigned()) {
    throw DataError(where + ": response.completion_tokens missing");
  }
  r.completion_tokens = j["completion_tokens"].get<std::uint64_t>();
  const std::string fr = j.value("finish_reason", "stop");
  if (fr == "stop") r.finish_reason = FinishReason::Stop;
  else if (fr == "length") r.finish_reason = FinishReason::Length;
  else if (fr == "error") r.finish_reason = FinishReason::Error;
  else throw DataError(where + ": unknown finish_reason '" + fr + "'");
  return r;
}

struct RetryPolicy {
  int max_attempts = 5;
  std::chrono::milliseconds initial_backoff{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{30000};

  std::chrono::milliseconds backoff_after(int attempt) const {
    double ms = static_cast<double>(initial_backoff.count());
    for (int i = 1; i < attempt; ++i) ms *= multiplier;
    return std::chrono::milliseconds(
        static_cast<std::int64_t>(std::min(ms, static_cast<double>(max_backoff.count()))));
  }
};

enum class GenerateRoute { Chat, Completions };
enum class ScoringRoute { Echo, PromptLogprobs };

struct ClientConfig {
  std::string base_url;
  std::string api_key;
  std::chrono::seconds timeout{600};
  GenerateRoute generate_route = GenerateRoute::Chat;
  ScoringRoute scoring_route = ScoringRoute::Echo;
  RetryPolicy retry;

  /// Reads INFERENCE_BASE_URL and INFERENCE_API_KEY.
  static ClientConfig from_env() {
    ClientConfig c;
    if (const char* url = std::getenv("INFERENCE_BASE_URL")) c.base_url = url;
    if (const char* key = std::getenv("INFERENCE_API_KEY")) c.api_key = key;
    return c;
  }

  void validate() const {
    if (base_url.empty()) throw ConfigError("INFERENCE_BASE_URL is not set");
    if (base_url.rfind("http://", 0) != 0 && base_url.rfind("https://", 0) != 0) {
      throw ConfigError("inference base URL '" + base_url + "' must start with http:// or https://");
    }
    const auto host_start = base_url.find("://") + 3;
    if (host_start >= base_url.size() || base_url[host_start] == '/' || base_url[host_start] == ':') {
      throw ConfigError("inference base URL '" + base_url + "' has no host");
    }
    if (api_key.empty()) throw ConfigError("INFERENCE_API_KEY is not set");
    if (retry.max_attempts < 1) throw ConfigError("retry.max_attempts must be at least 1");
  }
};

/// Source of generations and prompt scores. Implementations are shareable
/// across threads.
class InferenceBackend {
 public:
  virtual ~InferenceBackend() = default;
  virtual GenResponse generate(const GenRequest& request) = 0;
  /// Logprobs of exactly the tokens of `text` conditioned on `context`.
  virtual std::vector<TokenLogprob> score(const std::string& model, const std::string& text,
                                          const std::string& context) = 0;
};

namespace detail {

inline std::size_t utf8_code_points(std::string_view s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

inline bool transient_status(int status) { return status == 429 || (status >= 500 && status <= 599); }

}  // namespace detail

class HttpBackend : public InferenceBackend {
 public:
  explicit HttpBackend(ClientConfig config) : config_(std::move(config)) {
    config_.validate();
    const auto host_start = config_.base_url.find("://") + 3;
    const auto path_start = config_.base_url.find('/', host_start);
    origin_ = config_.base_url.substr(0, path_start);
    std::string prefix = path_start == std::string::npos ? "" : config_.base_url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    if (prefix.size() < 3 || prefix.compare(prefix.size() - 3, 3, "/v1") != 0) prefix += "/v1";
    api_prefix_ = prefix;
  }

  /// Number of HTTP requests sent so far (all attempts).
  std::uint64_t requests_sent() const noexcept { return requests_sent_; }

  GenResponse generate(const GenRequest& request) override {
    nlohmann::json body = {{"model", request.model},
                           {"max_tokens", request.max_tokens},
                           {"temperature", request.temperature}};
    std::string path;
    if (config_.generate_route == GenerateRoute::Chat) {
      path = api_prefix_ + "/chat/completions";
      body["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", request.prompt}}});
      body["logprobs"] = request.want_logprobs;
    } else {
      path = api_prefix_ + "/completions";
      body["prompt"] = request.prompt;
      if (request.want_logprobs) body["logprobs"] = 0;
    }

    GenResponse out;
    std::string last_error;
    for (int attempt = 1; attempt <= config_.retry.max_attempts; ++attempt) {
      out.attempts = attempt;
      const Outcome o = post(path, body);
      if (o.ok) {
        try {
          GenResponse parsed = parse_generation(o.body, request.want_logprobs);
          parsed.attempts = attempt;
          if (attempt > 1) log(LogLevel::kInfo, "request succeeded after {} attempts", attempt);
          return parsed;
        } catch (const std::exception& e) {
          last_error = std::string("unparseable response: ") + e.what();
          break;
        }
      }
      last_error = o.error;
      if (!o.transient) break;
      if (attempt < config_.retry.max_attempts) {
        const auto wait = config_.retry.backoff_after(attempt);
        log(LogLevel::kWarn, "attempt {} failed ({}); retrying in {} ms", attempt, o.error, wait.count());
        std::this_thread::sleep_for(wait);
      }
    }
    log(LogLevel::kError, "request failed after {} attempts: {}", out.attempts, last_error);
    out.finish_reason = FinishReason::Error;
    out.error = last_error;
    return out;
  }

  std::vector<TokenLogprob> score(const std::string& model, const std::string& text,
                                  const std::string& context) override {
    if (text.empty()) return {};
    const std::string prompt = context + text;
    nlohmann::json body = {{"model", model}, {"prompt", prompt}, {"temperature", 0.0}};
    if (config_.scoring_route == ScoringRoute::Echo) {
      body["max_tokens"] = 0;
      body["echo"] = true;
      body["logprobs"] = 0;
    } else {
      body["max_tokens"] = 1;
      body["prompt_logprobs"] = 0;
    }
    const std::string path = api_prefix_ + "/completions";
    std::string last_error;
    for (int attempt = 1; attempt <= config_.retry.max_attempts; ++attempt) {
      const Outcome o = post(path, body);
      if (o.ok) {
        nlohmann::json doc;
        try {
          doc = nlohmann::json::parse(o.body);
        } catch (const nlohmann::json::parse_error& e) {
          throw NetworkError(std::string("scoring response is not JSON: ") + e.what());
        }
        return config_.scoring_route == ScoringRoute::Echo ? select_echo(doc, context, text)
                                                          : select_prompt_logprobs(doc, context, text);
      }
      if (o.status == 400 || o.status == 404 || o.status == 422 || o.status == 501) {
        throw CapabilityError("server rejected prompt scoring (HTTP " + std::to_string(o.status) + "): " +
                              o.error + "; score offline from a recorded transcript instead");
      }
      last_error = o.error;
      if (!o.transient) break;
      if (attempt < config_.retry.max_attempts) {
        const auto wait = config_.retry.backoff_after(attempt);
        log(LogLevel::kWarn, "scoring attempt {} failed ({}); retrying in {} ms", attempt, o.error, wait.count());
        std::this_thread::sleep_for(wait);
      }
    }
    throw NetworkError("scoring request failed: " + last_error);
  }

 private:
  struct Outcome {
    bool ok = false;
    bool transient = false;
    int status = 0;
    std::string body;
    std::string error;
  };

  Outcome post(const std::string& path, const nlohmann::json& body) {
    ++requests_sent_;
    httplib::Client client(origin_);
    client.set_connection_timeout(std::chrono::seconds(10));
    client.set_read_timeout(config_.timeout);
    client.set_write_timeout(config_.timeout);
    client.set_bearer_token_auth(config_.api_key);
    auto res = client.Post(path, body.dump(), "application/json");
    Outcome o;
    if (!res) {
      o.transient = true;
      o.error = "transport error: " + httplib::to_string(res.error());
      return o;
    }
    o.status = res->status;
    o.body = res->body;
    if (res->status == 200) {
      o.ok = true;
      return o;
    }
    o.transient = detail::transient_status(res->status);
    o.error = "HTTP " + std::to_string(res->status) + " " + res->body.substr(0, 200);
    return o;
  }

  static GenResponse parse_generation(const std::string& text, bool want_logprobs) {
    const auto doc = nlohmann::json::parse(text);
    const auto& choice = doc.at("choices").at(0);
    GenResponse r;
    if (choice.contains("message")) {
      const auto& content = choice["message"].value("content", nlohmann::json(nullptr));
      r.text = content.is_string() ? content.get<std::string>() : "";
    } else {
      r.text = choice.value("text", "");
    }
    const auto fr = choice.value("finish_reason", nlohmann::json(nullptr));
    r.finish_reason = fr.is_string() && fr.get<std::string>() == "length" ? FinishReason::Length : FinishReason::Stop;

    if (want_logprobs && choice.contains("logprobs") && !choice["logprobs"].is_null()) {
      const auto& lp = choice["logprobs"];
      std::vector<TokenLogprob> entries;
      if (lp.contains("content") && lp["content"].is_array()) {
        for (const auto& e : lp["content"]) {
          entries.push_back({e.value("token", ""), e.contains("logprob") && e["logprob"].is_number()
                                                       ? std::optional<double>(e["logprob"].get<double>())
                                                       : std::nullopt});
        }
      } else if (lp.contains("tokens")) {
        const auto& toks = lp["tokens"];
        const auto& lps = lp.value("token_logprobs", nlohmann::json::array());
        for (std::size_t i = 0; i < toks.size(); ++i) {
          std::optional<double> v;
          if (i < lps.size() && lps[i].is_number()) v = lps[i].get<double>();
          entries.push_back({toks[i].get<std::string>(), v});
        }
      }
      r.token_logprobs = std::move(entries);
    }

    const auto usage = doc.value("usage", nlohmann::json::object());
    if (usage.contains("completion_tokens") && usage["completion_tokens"].is_number_unsigned()) {
      r.completion_tokens = usage["completion_tokens"].get<std::uint64_t>();
    }
    if (r.token_logprobs) r.completion_tokens = r.token_logprobs->size();
    return r;
  }

  static std::vector<TokenLogprob> select_echo(const nlohmann::json& doc, const std::string& context,
                                               const std::string& text) {
    const nlohmann::json* lp = nullptr;
    if (doc.contains("choices") && !doc["choices"].empty() && doc["choices"][0].contains("logprobs")) {
      lp = &doc["choices"][0]["logprobs"];
    }
    if (lp == nullptr || lp->is_null() || !lp->contains("tokens") || !lp->contains("token_logprobs")) {
      throw CapabilityError("server returned no prompt logprobs for an echo request; "
                            "score offline from a recorded transcript instead");
    }
    const auto& tokens = (*lp)["tokens"];
    const auto& lps = (*lp)["token_logprobs"];
    const bool has_offsets = lp->contains("text_offset") && (*lp)["text_offset"].is_array();
    if (!has_offsets && !context.empty()) {
      throw CapabilityError("server returned no text offsets; cannot separate context from text");
    }
    const std::size_t ctx_len = detail::utf8_code_points(context);
    const std::size_t end_len = ctx_len + detail::utf8_code_points(text);
    std::vector<TokenLogprob> out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (has_offsets) {
        const auto off = (*lp)["text_offset"][i].get<std::size_t>();
        if (off < ctx_len || off >= end_len) continue;
      }
      std::optional<double> v;
      if (i < lps.size() && lps[i].is_number()) v = lps[i].get<double>();
      out.push_back({tokens[i].get<std::string>(), v});
    }
    return out;
  }

  static std::vector<TokenLogprob> select_prompt_logprobs(const nlohmann::json& doc, const std::string& context,
                                                          const std::string& text) {
    const nlohmann::json* pl = nullptr;
    if (doc.contains("choices") && !doc["choices"].empty() && doc["choices"][0].contains("prompt_logprobs")) {
      pl = &doc["choices"][0]["prompt_logprobs"];
    }
    if (pl == nullptr || !pl->is_array()) {
      throw CapabilityError("server returned no prompt_logprobs; score offline from a recorded transcript instead");
    }
    // Walk back from the end so the undecoded first position never matters.
    std::vector<TokenLogprob> all(pl->size());
    std::vector<std::size_t> start(pl->size(), 0);
    std::size_t cursor = detail::utf8_code_points(context) + detail::utf8_code_points(text);
    for (std::size_t i = pl->size(); i-- > 0;) {
      const auto& entry = (*pl)[i];
      if (entry.is_null() || !entry.is_object() || entry.empty()) {
        start[i] = 0;
        continue;
      }
      const auto& v = entry.begin().value();
      all[i].token = v.value("decoded_token", "");
      if (v.contains("logprob") && v["logprob"].is_number()) all[i].logprob = v["logprob"].get<double>();
      const std::size_t len = detail::utf8_code_points(all[i].token);
      cursor = cursor >= len ? cursor - len : 0;
      start[i] = cursor;
    }
    const std::size_t ctx_len = detail::utf8_code_points(context);
    std::vector<TokenLogprob> out;
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (start[i] >= ctx_len && (i > 0 || context.empty())) out.push_back(all[i]);
    }
    return out;
  }

  ClientConfig config_;
  std::string origin_;
  std::string api_prefix_;
  std::atomic<std::uint64_t> requests_sent_{0};
};

/// Serves responses from a recorded transcript; never touches the network.
/// Transcript rows: {"key", "kind": "generate"|"score", "request", "response"}.
class ReplayBackend : public InferenceBackend {
 public:
  explicit ReplayBackend(const std::filesystem::path& transcript) {
    std::ifstream in(transcript);
    if (!in) throw DataError("cannot read transcript '" + transcript.string() + "'");
    JsonlReader reader(in, transcript.string());
    while (auto row = reader.next()) {
      if (!row->is_object() || !row->contains("key") || !(*row)["key"].is_string() ||
          !row->contains("response")) {
        throw DataError(reader.where() + ": transcript row needs 'key' and 'response'");
      }
      const std::string kind = row->value("kind", "generate");
      const std::string key = (*row)["key"].get<std::string>();
      if (kind == "generate") {
        generations_[key] = response_from_json((*row)["response"], reader.where());
      } else if (kind == "score") {
        scores_[key] = logprobs_from_json((*row)["response"].value("token_logprobs", nlohmann::json()),
                                          reader.where());
      } else {
        throw DataError(reader.where() + ": unknown transcript row kind '" + kind + "'");
      }
    }
  }

  GenResponse generate(const GenRequest& request) override {
    const std::string key = request_hash(request);
    auto it = generations_.find(key);
    if (it == generations_.end()) throw CacheMissError(key);
    GenResponse r = it->second;
    r.attempts = 0;
    return r;
  }

  std::vector<TokenLogprob> score(const std::string& model, const std::string& text,
                                  const std::string& context) override {
    if (text.empty()) return {};
    const std::string key = score_hash(model, text, context);
    auto it = scores_.find(key);
    if (it == scores_.end()) throw CacheMissError(key);
    return it->second;
  }

  std::size_t size() const noexcept { return generations_.size() + scores_.size(); }

 private:
  std::map<std::string, GenResponse> generations_;
  std::map<std::string, std::vector<TokenLogprob>> scores_;
};

/// Wraps another backend and records every successful response. Rows are kept
/// sorted by key so identical runs write identical transcripts.
class RecordingBackend : public InferenceBackend {
 public:
  RecordingBackend(InferenceBackend& inner, std::filesystem::path transcript)
      : inner_(inner), path_(std::move(transcript)) {}

  GenResponse generate(const GenRequest& request) override {
    GenResponse r = inner_.generate(request);
    if (r.finish_reason != FinishReason::Error) {
      nlohmann::ordered_json row;
      row["key"] = request_hash(request);
      row["kind"] = "generate";
      row["request"] = to_json(request);
      row["response"] = to_json(r);
      std::lock_guard lock(mu_);
      rows_[row["key"].get<std::string>()] = row.dump();
    }
    return r;
  }

  std::vector<TokenLogprob> score(const std::string& model, const std::string& text,
                                  const std::string& context) override {
    auto entries = inner_.score(model, text, context);
    nlohmann::ordered_json row;
    row["key"] = score_hash(model, text, context);
    row["kind"] = "score";
    row["request"] = {{"model", model}, {"text", text}, {"context", context}};
    row["response"] = {{"token_logprobs", logprobs_to_json(entries)}};
    std::lock_guard lock(mu_);
    rows_[row["key"].get<std::string>()] = row.dump();
    return entries;
  }

  /// Writes all rows recorded so far (plus any already in the file).
  void flush() {
    std::lock_guard lock(mu_);
    std::map<std::string, std::string> merged;
    if (std::ifstream in(path_); in) {
      JsonlReader reader(in, path_.string());
      while (auto row = reader.next()) merged[row->value("key", "")] = row->dump();
    }
    for (const auto& [k, v] : rows_) merged[k] = v;
    std::ofstream out(path_, std::ios::trunc);
    if (!out) throw DataError("cannot write transcript '" + path_.string() + "'");
    for (const auto& [_, line] : merged) out << line << '\n';
  }

 private:
  InferenceBackend& inner_;
  std::filesystem::path path_;
  std::mutex mu_;
  std::map<std::string, std::string> rows_;
};

/// Runs requests with at most `concurrency` in flight. Responses line up with
/// requests by index regardless of completion order. Transport failures come
/// back as FinishReason::Error; other errors (e.g. replay misses) propagate.
inline std::vector<GenResponse> generate_batch(InferenceBackend& backend, std::span<const GenRequest> requests,
                                               unsigned concurrency) {
  if (concurrency < 1) throw ConfigError("concurrency must be at least 1");
  std::vector<GenResponse> out(requests.size());
  parallel_for(requests.size(), concurrency, [&](std::size_t i) { out[i] = backend.generate(requests[i]); });
  return out;
}

inline std::vector<TokenLogprob> score_logprobs(InferenceBackend& backend, const std::string& model,
                                                const std::string& text, const std::string& context = {}) {
  if (text.empty()) return {};
  return backend.score(model, text, context);
}

}  // namespace midcot
