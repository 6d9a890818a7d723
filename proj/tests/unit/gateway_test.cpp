#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <unistd.h>

#include "doctest.h"
#include "json.hpp"
#include "latentprobe/error.hpp"
#include "latentprobe/inference_gateway.hpp"
#include "latentprobe/worker_pool.hpp"

using namespace latentprobe;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

SamplingConfig three() {
  SamplingConfig c;
  c.n_samples = 3;
  return c;
}

class CountingBackend : public Backend {
 public:
  std::vector<Completion> complete(std::string_view prompt, const SamplingConfig& config) override {
    ++calls;
    std::vector<Completion> out;
    for (int i = 0; i < config.n_samples; ++i) out.push_back({std::string(prompt) + "#" + std::to_string(i), i});
    return out;
  }
  std::atomic<int> calls{0};
};

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("latentprobe_unit_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

// A local OpenAI-style completion server whose status codes follow a script.
class ScriptedServer {
 public:
  explicit ScriptedServer(std::vector<int> statuses) : statuses_(std::move(statuses)) {
    server_.Post("/v1/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const std::size_t i = hits_.fetch_add(1);
      bodies_.push_back(json::parse(req.body));
      auth_ = req.get_header_value("Authorization");
      const int status = i < statuses_.size() ? statuses_[i] : 200;
      res.status = status;
      if (status != 200) {
        res.set_content("{\"error\": \"scripted\"}", "application/json");
        return;
      }
      const json body = json::parse(req.body);
      json choices = json::array();
      // Reverse order on the wire; the client sorts by index.
      for (int k = body.at("n").get<int>() - 1; k >= 0; --k) {
        choices.push_back({{"index", k},
                           {"text", "seed" + std::to_string(body.at("seed").get<long long>()) + "/" +
                                        std::to_string(k)},
                           {"finish_reason", k == 0 ? "length" : "stop"}});
      }
      res.set_content(json{{"choices", choices}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~ScriptedServer() {
    server_.stop();
    thread_.join();
  }

  HttpBackendOptions options() const {
    HttpBackendOptions o;
    o.base_url = "http://127.0.0.1:" + std::to_string(port_);
    o.model = "test-model";
    o.retry_limit = 3;
    o.initial_backoff_ms = 1;
    o.timeout_seconds = 5;
    return o;
  }
  std::size_t hits() const { return hits_.load(); }
  const std::vector<json>& bodies() const { return bodies_; }
  const std::string& auth() const { return auth_; }

 private:
  httplib::Server server_;
  std::vector<int> statuses_;
  std::atomic<std::size_t> hits_{0};
  std::vector<json> bodies_;
  std::string auth_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST_CASE("fingerprint matches an independent SHA-256 of the documented layout") {
  SamplingConfig d;
  CHECK(fingerprint("hello", d) == "f43d3a66351a0582d2e8359659669a320b20b94ecd2292bf91c75a411eca6369");
  SamplingConfig c;
  c.temperature = 0.0;
  c.top_p = 1.0;
  c.seed = 7;
  c.max_tokens = 16384;
  c.n_samples = 1;
  CHECK(fingerprint("জ্যানেট", c) == "82e6e81505816a74c28f413296e55feb2240e0c3ea0d6ca38d963a1108d72da6");
}

TEST_CASE("fingerprint separates every field") {
  const SamplingConfig base;
  const std::string fp = fingerprint("p", base);
  CHECK(fingerprint("p", base) == fp);
  CHECK(fingerprint("p ", base) != fp);
  auto changed = [&](auto mutate) {
    SamplingConfig c = base;
    mutate(c);
    return fingerprint("p", c) != fp;
  };
  CHECK(changed([](SamplingConfig& c) { c.temperature = 0.7; }));
  CHECK(changed([](SamplingConfig& c) { c.top_p = 0.9; }));
  CHECK(changed([](SamplingConfig& c) { c.seed = 43; }));
  CHECK(changed([](SamplingConfig& c) { c.max_tokens = 4097; }));
  CHECK(changed([](SamplingConfig& c) { c.n_samples = 9; }));
}

TEST_CASE("sampling defaults and validation") {
  CHECK(SamplingConfig::defaults_for(Dataset::kMgsm).max_tokens == 4096);
  CHECK(SamplingConfig::defaults_for(Dataset::kAime).max_tokens == 16384);
  const SamplingConfig d;
  CHECK(d.temperature == 0.6);
  CHECK(d.top_p == 0.95);
  CHECK(d.n_samples == 10);
  SamplingConfig bad;
  bad.top_p = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.n_samples = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("mock backend replays by fingerprint") {
  const SamplingConfig c = three();
  std::stringstream fixture;
  fixture << json{{"fingerprint", fingerprint("q1", c)},
                  {"completions", {"a", "b", "c", "d"}},
                  {"finish_reasons", {"stop", "length", "stop", "stop"}}}
                 .dump()
          << "\n\n";
  MockBackend mock = MockBackend::parse(fixture);
  CHECK(mock.size() == 1);
  const auto out = mock.complete("q1", c);
  REQUIRE(out.size() == 3);
  CHECK(out[1].text == "b");
  CHECK(out[1].finish_reason == FinishReason::kLength);
  CHECK(out[2].sample_index == 2);

  try {
    mock.complete("q2", c);
    FAIL("expected a miss");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kBackend);
    CHECK(std::string(e.what()).find(fingerprint("q2", c)) != std::string::npos);
  }
  SamplingConfig five = c;
  five.n_samples = 5;
  // Different n is a different fingerprint, hence a miss.
  CHECK_THROWS_AS(mock.complete("q1", five), Error);

  std::stringstream broken("{\"completions\": []}\n");
  CHECK_THROWS_AS(MockBackend::parse(broken), Error);
}

TEST_CASE("cache makes a rerun free") {
  const fs::path path = scratch("cache.jsonl");
  auto backend = std::make_shared<CountingBackend>();
  {
    InferenceGateway gw(backend, std::make_shared<ResponseCache>(path, false));
    gw.generate_text("a", three());
    gw.generate_text("b", three());
    gw.generate_text("a", three());
    CHECK(gw.backend_requests() == 2);
    CHECK(gw.cache_hits() == 1);
  }
  {
    InferenceGateway gw(backend, std::make_shared<ResponseCache>(path, true));
    const auto out = gw.generate_text("b", three());
    CHECK(out[2].text == "b#2");
    gw.generate_text("a", three());
    CHECK(gw.backend_requests() == 0);
    CHECK(gw.cache_hits() == 2);
  }
  // The cache file replays as a mock fixture.
  MockBackend replay = MockBackend::load(path);
  CHECK(replay.size() == 2);
  CHECK(replay.complete("a", three())[0].text == "a#0");
  {
    // Without resume the cache starts empty.
    InferenceGateway gw(backend, std::make_shared<ResponseCache>(path, false));
    gw.generate_text("a", three());
    CHECK(gw.backend_requests() == 1);
  }
  CHECK(backend->calls == 3);
  fs::remove_all(path.parent_path());
}

TEST_CASE("gateway rejects short backend answers") {
  class Short : public Backend {
   public:
    std::vector<Completion> complete(std::string_view, const SamplingConfig&) override { return {{"x", 0}}; }
  };
  InferenceGateway gw(std::make_shared<Short>());
  CHECK_THROWS_AS(gw.generate_text("p", three()), Error);
}

TEST_CASE("http backend retries 5xx then succeeds") {
  ScriptedServer server({500, 503, 429});
  auto options = server.options();
  options.api_key = "test-token";
  HttpBackend http(options);
  const auto out = http.complete("prompt", three());
  CHECK(http.attempts() == 4);
  CHECK(server.hits() == 4);
  REQUIRE(out.size() == 3);
  CHECK(out[0].text == "seed42/0");
  CHECK(out[0].finish_reason == FinishReason::kLength);
  CHECK(out[2].text == "seed42/2");
  CHECK(server.auth() == "Bearer test-token");
  const json& body = server.bodies().back();
  CHECK(body.at("model") == "test-model");
  CHECK(body.at("prompt") == "prompt");
  CHECK(body.at("n") == 3);
  CHECK(body.at("max_tokens") == 4096);
}

TEST_CASE("http backend gives up after the retry limit") {
  ScriptedServer server({500, 500, 500, 500, 500});
  HttpBackend http(server.options());
  try {
    http.complete("prompt", three());
    FAIL("expected failure");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kBackend);
  }
  CHECK(http.attempts() == 4);
}

TEST_CASE("http backend does not retry client errors") {
  ScriptedServer server({400});
  HttpBackend http(server.options());
  CHECK_THROWS_AS(http.complete("prompt", three()), Error);
  CHECK(http.attempts() == 1);
  CHECK(server.auth().empty());
}

TEST_CASE("http backend per-sample requests vary the seed") {
  ScriptedServer server({});
  auto options = server.options();
  options.per_sample_requests = true;
  HttpBackend http(options);
  const auto out = http.complete("prompt", three());
  CHECK(server.hits() == 3);
  REQUIRE(out.size() == 3);
  CHECK(out[0].text == "seed42/0");
  CHECK(out[1].text == "seed43/0");
  CHECK(out[2].text == "seed44/0");
  CHECK(out[2].sample_index == 2);
  for (const json& b : server.bodies()) CHECK(b.at("n") == 1);
}

TEST_CASE("http backend network failure") {
  HttpBackendOptions o;
  o.base_url = "http://127.0.0.1:1";
  o.retry_limit = 1;
  o.initial_backoff_ms = 1;
  HttpBackend http(o);
  CHECK_THROWS_AS(http.complete("p", three()), Error);
  CHECK(http.attempts() == 2);
  HttpBackendOptions schemeless;
  schemeless.base_url = "localhost:8000";
  CHECK_THROWS_AS(HttpBackend{schemeless}, Error);
}

TEST_CASE("run_ordered keeps index order and reports the first failure") {
  const auto squares = run_ordered<int>(100, 8, [](std::size_t i) { return static_cast<int>(i * i); });
  REQUIRE(squares.size() == 100);
  for (std::size_t i = 0; i < squares.size(); ++i) CHECK(squares[i] == static_cast<int>(i * i));
  CHECK(run_ordered<int>(0, 4, [](std::size_t) { return 1; }).empty());

  try {
    run_ordered<int>(50, 1, [](std::size_t i) -> int {
      if (i == 7 || i == 20) throw std::runtime_error("task " + std::to_string(i));
      return 0;
    });
    FAIL("expected failure");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()) == "task 7");
  }
}

TEST_CASE("concurrent identical requests reach the backend once") {
  class Slow : public Backend {
   public:
    std::vector<Completion> complete(std::string_view prompt, const SamplingConfig& config) override {
      ++calls;
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
      if (prompt == "boom") throw BackendError("scripted failure");
      std::vector<Completion> out;
      for (int i = 0; i < config.n_samples; ++i) out.push_back({std::string(prompt), i});
      return out;
    }
    std::atomic<int> calls{0};
  };
  auto slow = std::make_shared<Slow>();
  InferenceGateway gw(slow);
  const auto texts = run_ordered<std::string>(16, 8, [&](std::size_t i) {
    return gw.generate_text(i % 2 ? "odd" : "even", three()).front().text;
  });
  for (std::size_t i = 0; i < texts.size(); ++i) CHECK(texts[i] == (i % 2 ? "odd" : "even"));
  // Without a cache, only requests that overlap in time are shared.
  CHECK(slow->calls >= 2);
  CHECK(gw.backend_requests() + gw.cache_hits() == 16);

  auto cached = std::make_shared<Slow>();
  const fs::path path = scratch("coalesce.jsonl");
  InferenceGateway with_cache(cached, std::make_shared<ResponseCache>(path, false));
  run_ordered<int>(16, 8, [&](std::size_t i) {
    with_cache.generate_text(i % 2 ? "odd" : "even", three());
    return 0;
  });
  CHECK(cached->calls == 2);
  CHECK(with_cache.backend_requests() == 2);
  CHECK(with_cache.cache_hits() == 14);

  // A failure reaches every waiter and is not remembered.
  CHECK_THROWS_AS(run_ordered<int>(4, 4,
                                   [&](std::size_t) {
                                     with_cache.generate_text("boom", three());
                                     return 0;
                                   }),
                  Error);
  const int before = cached->calls;
  CHECK_THROWS_AS(with_cache.generate_text("boom", three()), Error);
  CHECK(cached->calls == before + 1);
  fs::remove_all(path.parent_path());
}
