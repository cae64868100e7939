#include <atomic>
#include <cmath>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "midcot/inference.hpp"
#include "support.hpp"

using namespace midcot;
using testing_support::TempDir;

namespace {

// Local OpenAI-compatible stand-in. Handlers see the parsed request body.
class MockServer {
 public:
  using Handler = std::function<void(const nlohmann::json&, httplib::Response&)>;

  MockServer() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      handle(chat_, req, res);
    });
    server_.Post("/v1/completions", [this](const httplib::Request& req, httplib::Response& res) {
      handle(completions_, req, res);
    });
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  void on_chat(Handler h) { chat_ = std::move(h); }
  void on_completions(Handler h) { completions_ = std::move(h); }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int hits() const { return hits_; }
  nlohmann::json last_body() const {
    std::lock_guard lock(mu_);
    return last_;
  }
  std::string last_auth() const {
    std::lock_guard lock(mu_);
    return auth_;
  }

 private:
  void handle(const Handler& h, const httplib::Request& req, httplib::Response& res) {
    ++hits_;
    const auto body = nlohmann::json::parse(req.body);
    {
      std::lock_guard lock(mu_);
      last_ = body;
      auth_ = req.get_header_value("Authorization");
    }
    if (!h) {
      res.status = 404;
      return;
    }
    h(body, res);
  }

  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> hits_{0};
  mutable std::mutex mu_;
  nlohmann::json last_;
  std::string auth_;
  Handler chat_;
  Handler completions_;
};

ClientConfig config_for(const MockServer& s) {
  ClientConfig c;
  c.base_url = s.url();
  c.api_key = "test-key";
  c.timeout = std::chrono::seconds(5);
  c.retry.initial_backoff = std::chrono::milliseconds(1);
  c.retry.max_backoff = std::chrono::milliseconds(5);
  return c;
}

void reply_chat(httplib::Response& res, const std::string& text, const std::string& finish = "stop",
                int tokens = 3) {
  const nlohmann::json body = {
      {"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", text}}}, {"finish_reason", finish}}}},
      {"usage", {{"completion_tokens", tokens}}}};
  res.set_content(body.dump(), "application/json");
}

GenRequest request(std::string prompt) {
  GenRequest r;
  r.model = "teacher";
  r.prompt = std::move(prompt);
  return r;
}

}  // namespace

TEST(Http, FixedCompletion) {
  MockServer server;
  server.on_chat([](const nlohmann::json&, httplib::Response& res) { reply_chat(res, "so \\boxed{4}"); });
  HttpBackend backend(config_for(server));
  const auto r = backend.generate(request("2+2?"));
  EXPECT_EQ(r.text, "so \\boxed{4}");
  EXPECT_EQ(r.finish_reason, FinishReason::Stop);
  EXPECT_EQ(r.completion_tokens, 3u);
  EXPECT_EQ(r.attempts, 1);
  EXPECT_EQ(server.last_auth(), "Bearer test-key");
}

TEST(Http, GreedyDefaultsOnTheWire) {
  MockServer server;
  server.on_chat([](const nlohmann::json&, httplib::Response& res) { reply_chat(res, "ok"); });
  HttpBackend backend(config_for(server));
  backend.generate(request("p"));
  const auto body = server.last_body();
  EXPECT_EQ(body["temperature"], 0.0);
  EXPECT_EQ(body["max_tokens"], 16384);
  EXPECT_EQ(body["model"], "teacher");
  EXPECT_EQ(body["messages"][0]["content"], "p");
  for (const char* sampling : {"top_p", "top_k", "seed", "n", "presence_penalty", "frequency_penalty"}) {
    EXPECT_FALSE(body.contains(sampling)) << sampling;
  }
}

TEST(Http, CompletionsRouteAndLengthFinish) {
  MockServer server;
  server.on_completions([](const nlohmann::json&, httplib::Response& res) {
    const nlohmann::json body = {
        {"choices", {{{"text", "long..."}, {"finish_reason", "length"}}}}, {"usage", {{"completion_tokens", 16384}}}};
    res.set_content(body.dump(), "application/json");
  });
  auto cfg = config_for(server);
  cfg.generate_route = GenerateRoute::Completions;
  HttpBackend backend(cfg);
  const auto r = backend.generate(request("p"));
  EXPECT_EQ(server.last_body()["prompt"], "p");
  EXPECT_EQ(r.finish_reason, FinishReason::Length);
  EXPECT_EQ(r.completion_tokens, 16384u);
}

TEST(Http, RetriesTransientFailures) {
  MockServer server;
  std::atomic<int> calls{0};
  server.on_chat([&](const nlohmann::json&, httplib::Response& res) {
    if (++calls <= 2) {
      res.status = calls == 1 ? 503 : 429;
      res.set_content("busy", "text/plain");
      return;
    }
    reply_chat(res, "finally");
  });
  std::vector<std::string> logged;
  Logger::instance().set_sink([&](LogLevel, std::string_view m) { logged.emplace_back(m); });
  HttpBackend backend(config_for(server));
  const auto r = backend.generate(request("p"));
  Logger::instance().set_sink(nullptr);
  EXPECT_EQ(r.text, "finally");
  EXPECT_EQ(r.attempts, 3);
  EXPECT_EQ(server.hits(), 3);
  EXPECT_EQ(backend.requests_sent(), 3u);
  bool saw_attempts = false;
  for (const auto& m : logged) saw_attempts |= m.find("after 3 attempts") != std::string::npos;
  EXPECT_TRUE(saw_attempts);
}

TEST(Http, ExhaustedRetriesYieldErrorNotThrow) {
  MockServer server;
  server.on_chat([](const nlohmann::json& body, httplib::Response& res) {
    if (body["messages"][0]["content"] == "bad") {
      res.status = 500;
    } else {
      reply_chat(res, "fine");
    }
  });
  auto cfg = config_for(server);
  cfg.retry.max_attempts = 3;
  Logger::instance().set_level(LogLevel::kOff);
  HttpBackend backend(cfg);
  const std::vector<GenRequest> reqs = {request("a"), request("bad"), request("c")};
  const auto out = generate_batch(backend, reqs, 2);
  Logger::instance().set_level(LogLevel::kInfo);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].text, "fine");
  EXPECT_EQ(out[1].finish_reason, FinishReason::Error);
  EXPECT_EQ(out[1].attempts, 3);
  EXPECT_NE(out[1].error.find("HTTP 500"), std::string::npos);
  EXPECT_EQ(out[2].text, "fine");
}

TEST(Http, ClientErrorsAreNotRetried) {
  MockServer server;
  server.on_chat([](const nlohmann::json&, httplib::Response& res) { res.status = 401; });
  Logger::instance().set_level(LogLevel::kOff);
  HttpBackend backend(config_for(server));
  const auto r = backend.generate(request("p"));
  Logger::instance().set_level(LogLevel::kInfo);
  EXPECT_EQ(r.finish_reason, FinishReason::Error);
  EXPECT_EQ(server.hits(), 1);
}

TEST(Http, BatchStaysAlignedUnderConcurrency) {
  MockServer server;
  server.on_chat([](const nlohmann::json& body, httplib::Response& res) {
    const std::string p = body["messages"][0]["content"];
    // Later prompts answer faster, so completion order differs from request order.
    std::this_thread::sleep_for(std::chrono::milliseconds(40 - std::stoi(p)));
    reply_chat(res, "echo " + p);
  });
  HttpBackend backend(config_for(server));
  std::vector<GenRequest> reqs;
  for (int i = 0; i < 40; ++i) reqs.push_back(request(std::to_string(i)));
  for (unsigned c : {1u, 4u, 16u}) {
    const auto out = generate_batch(backend, reqs, c);
    ASSERT_EQ(out.size(), reqs.size());
    for (int i = 0; i < 40; ++i) ASSERT_EQ(out[i].text, "echo " + std::to_string(i)) << "concurrency " << c;
  }
  EXPECT_TRUE(generate_batch(backend, std::vector<GenRequest>{}, 4).empty());
  EXPECT_THROW(generate_batch(backend, reqs, 0), ConfigError);
}

TEST(Http, EchoScoring) {
  MockServer server;
  server.on_completions([](const nlohmann::json& body, httplib::Response& res) {
    EXPECT_EQ(body["echo"], true);
    EXPECT_EQ(body["max_tokens"], 0);
    EXPECT_EQ(body["prompt"], "Q: ab");
    const nlohmann::json lp = {{"tokens", {"Q:", " ", "a", "b"}},
                               {"token_logprobs", {nullptr, -1.0, std::log(0.5), std::log(0.5)}},
                               {"text_offset", {0, 2, 3, 4}}};
    res.set_content(nlohmann::json({{"choices", {{{"text", "Q: ab"}, {"logprobs", lp}}}}}).dump(), "application/json");
  });
  HttpBackend backend(config_for(server));
  const auto entries = score_logprobs(backend, "m", "ab", "Q: ");
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_EQ(entries[0].token, "a");
  EXPECT_NEAR(*entries[0].logprob, -0.6931, 1e-4);
  EXPECT_NEAR(*entries[1].logprob, -0.6931, 1e-4);
  EXPECT_TRUE(score_logprobs(backend, "m", "").empty());
}

TEST(Http, PromptLogprobsScoring) {
  MockServer server;
  server.on_completions([](const nlohmann::json& body, httplib::Response& res) {
    EXPECT_EQ(body["prompt_logprobs"], 0);
    const nlohmann::json pl = nlohmann::json::array(
        {nullptr, {{"7", {{"logprob", -2.0}, {"decoded_token", "ab"}}}}, {{"9", {{"logprob", -0.5}, {"decoded_token", "cd"}}}}});
    res.set_content(nlohmann::json({{"choices", {{{"text", "x"}, {"prompt_logprobs", pl}}}}}).dump(), "application/json");
  });
  auto cfg = config_for(server);
  cfg.scoring_route = ScoringRoute::PromptLogprobs;
  HttpBackend backend(cfg);
  const auto entries = score_logprobs(backend, "m", "cd", "xxab");
  ASSERT_EQ(entries.size(), 1u);
  EXPECT_EQ(entries[0].token, "cd");
  EXPECT_EQ(entries[0].logprob, -0.5);
}

TEST(Http, MissingScoringSupportIsCapabilityError) {
  MockServer server;
  server.on_completions([](const nlohmann::json&, httplib::Response& res) {
    res.status = 400;
    res.set_content(R"({"error":"echo not supported"})", "application/json");
  });
  HttpBackend backend(config_for(server));
  try {
    score_logprobs(backend, "m", "text");
    FAIL() << "expected a capability error";
  } catch (const CapabilityError& e) {
    EXPECT_NE(std::string(e.what()).find("offline"), std::string::npos);
    EXPECT_EQ(e.code(), ExitCode::kNetwork);
  }

  MockServer no_logprobs;
  no_logprobs.on_completions([](const nlohmann::json&, httplib::Response& res) {
    res.set_content(R"({"choices":[{"text":"x","logprobs":null}]})", "application/json");
  });
  HttpBackend other(config_for(no_logprobs));
  EXPECT_THROW(score_logprobs(other, "m", "text"), CapabilityError);
}

TEST(Http, BaseUrlWithV1Prefix) {
  MockServer server;
  server.on_chat([](const nlohmann::json&, httplib::Response& res) { reply_chat(res, "ok"); });
  auto cfg = config_for(server);
  cfg.base_url = server.url() + "/v1/";
  HttpBackend backend(cfg);
  EXPECT_EQ(backend.generate(request("p")).text, "ok");
}

TEST(Config, FailsFastBeforeAnyRequest) {
  ClientConfig c;
  c.api_key = "k";
  EXPECT_THROW(HttpBackend{c}, ConfigError);  // no URL
  c.base_url = "ftp://host";
  EXPECT_THROW(HttpBackend{c}, ConfigError);
  c.base_url = "http://";
  EXPECT_THROW(HttpBackend{c}, ConfigError);
  c.base_url = "http://127.0.0.1:1";
  c.api_key.clear();
  EXPECT_THROW(HttpBackend{c}, ConfigError);
  c.api_key = "k";
  c.retry.max_attempts = 0;
  EXPECT_THROW(HttpBackend{c}, ConfigError);
}

TEST(Config, TransportFailureIsTransient) {
  ClientConfig c;
  c.base_url = "http://127.0.0.1:1";  // nothing listens here
  c.api_key = "k";
  c.retry.max_attempts = 2;
  c.retry.initial_backoff = std::chrono::milliseconds(1);
  Logger::instance().set_level(LogLevel::kOff);
  HttpBackend backend(c);
  const auto r = backend.generate(request("p"));
  Logger::instance().set_level(LogLevel::kInfo);
  EXPECT_EQ(r.finish_reason, FinishReason::Error);
  EXPECT_EQ(r.attempts, 2);
}

TEST(Retry, BackoffIsExponentialAndCapped) {
  RetryPolicy p;
  p.initial_backoff = std::chrono::milliseconds(100);
  p.multiplier = 2.0;
  p.max_backoff = std::chrono::milliseconds(500);
  EXPECT_EQ(p.backoff_after(1).count(), 100);
  EXPECT_EQ(p.backoff_after(2).count(), 200);
  EXPECT_EQ(p.backoff_after(3).count(), 400);
  EXPECT_EQ(p.backoff_after(4).count(), 500);
}

TEST(Replay, MissNamesTheRequestHash) {
  TempDir dir;
  testing_support::write_file(dir / "t.jsonl", "");
  ReplayBackend replay(dir / "t.jsonl");
  EXPECT_EQ(replay.size(), 0u);
  EXPECT_TRUE(generate_batch(replay, std::vector<GenRequest>{}, 1).empty());
  const GenRequest r = request("unseen");
  try {
    replay.generate(r);
    FAIL() << "expected a cache miss";
  } catch (const CacheMissError& e) {
    EXPECT_EQ(e.key(), request_hash(r));
    EXPECT_NE(std::string(e.what()).find(request_hash(r)), std::string::npos);
    EXPECT_EQ(e.code(), ExitCode::kData);
  }
  EXPECT_THROW(replay.score("m", "t", ""), CacheMissError);
}

TEST(Replay, MalformedRows) {
  TempDir dir;
  testing_support::write_file(dir / "a.jsonl", "{\"response\":{}}\n");
  EXPECT_THROW(ReplayBackend(dir / "a.jsonl"), DataError);
  testing_support::write_file(dir / "b.jsonl", "{\"key\":\"k\",\"response\":{\"text\":\"x\"}}\n");
  EXPECT_THROW(ReplayBackend(dir / "b.jsonl"), DataError);  // no completion_tokens
  testing_support::write_file(dir / "c.jsonl", "not json\n");
  EXPECT_THROW(ReplayBackend(dir / "c.jsonl"), DataError);
  EXPECT_THROW(ReplayBackend(dir / "missing.jsonl"), DataError);
}

TEST(Replay, HashesAreStableAndSensitive) {
  GenRequest a = request("p");
  const std::string h = request_hash(a);
  EXPECT_EQ(h.size(), 64u);
  EXPECT_EQ(request_hash(a), h);
  GenRequest b = a;
  b.max_tokens = 100;
  EXPECT_NE(request_hash(b), h);
  b = a;
  b.temperature = 0.7;
  EXPECT_NE(request_hash(b), h);
  b = a;
  b.want_logprobs = true;
  EXPECT_NE(request_hash(b), h);
  EXPECT_NE(score_hash("m", "ab", ""), score_hash("m", "b", "a"));
}

TEST(Replay, RecordThenReplayIsIdentical) {
  MockServer server;
  server.on_chat([](const nlohmann::json& body, httplib::Response& res) {
    const std::string p = body["messages"][0]["content"];
    reply_chat(res, "answer to " + p + " \\boxed{" + std::to_string(p.size()) + "}", p.size() > 3 ? "length" : "stop",
               static_cast<int>(p.size()));
  });
  server.on_completions([](const nlohmann::json&, httplib::Response& res) {
    const nlohmann::json lp = {{"tokens", {"h", "\xC3\xA9", "y"}}, {"token_logprobs", {nullptr, -0.25, -1.5}},
                               {"text_offset", {0, 1, 2}}};
    res.set_content(nlohmann::json({{"choices", {{{"text", ""}, {"logprobs", lp}}}}}).dump(), "application/json");
  });
  TempDir dir;
  std::vector<GenRequest> reqs;
  for (const char* p : {"a", "bb", "cccc", "dd", "\xE2\x88\x9A"}) reqs.push_back(request(p));

  HttpBackend live(config_for(server));
  RecordingBackend recorder(live, dir / "transcript.jsonl");
  const auto recorded = generate_batch(recorder, reqs, 3);
  const auto recorded_scores = score_logprobs(recorder, "m", "h\xC3\xA9y");
  recorder.flush();
  const int hits = server.hits();

  ReplayBackend replay(dir / "transcript.jsonl");
  EXPECT_EQ(replay.size(), 6u);
  const auto replayed = generate_batch(replay, reqs, 2);
  ASSERT_EQ(replayed.size(), recorded.size());
  for (std::size_t i = 0; i < reqs.size(); ++i) EXPECT_TRUE(replayed[i].same_payload(recorded[i])) << i;
  EXPECT_EQ(score_logprobs(replay, "m", "h\xC3\xA9y"), recorded_scores);
  EXPECT_EQ(server.hits(), hits);  // replay never touches the network

  // Re-recording the same batch writes the same bytes.
  const std::string first = testing_support::read_file(dir / "transcript.jsonl");
  RecordingBackend again(replay, dir / "transcript2.jsonl");
  generate_batch(again, reqs, 1);
  score_logprobs(again, "m", "h\xC3\xA9y");
  again.flush();
  EXPECT_EQ(testing_support::read_file(dir / "transcript2.jsonl"), first);
}
