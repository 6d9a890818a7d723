#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "latentprobe/corpus.hpp"
#include "latentprobe/language_control.hpp"

namespace latentprobe {

struct SamplingConfig {
  double temperature = 0.6;
  double top_p = 0.95;
  std::int64_t seed = 42;
  int max_tokens = 4096;
  int n_samples = 10;

  // max_tokens is 4096 for MGSM and 16384 for AIME; the rest is shared.
  static SamplingConfig defaults_for(Dataset dataset);
  void validate() const;
};

enum class FinishReason { kStop, kLength, kError };

std::string_view to_string(FinishReason reason);
FinishReason parse_finish_reason(std::string_view name);

struct Completion {
  std::string text;
  int sample_index = 0;
  FinishReason finish_reason = FinishReason::kStop;
};

// SHA-256 (hex) over the prompt bytes and every sampling field.
std::string fingerprint(std::string_view prompt_text, const SamplingConfig& config);
std::string fingerprint(const AssembledPrompt& prompt, const SamplingConfig& config);

class Backend {
 public:
  virtual ~Backend() = default;
  // Exactly config.n_samples completions in sample order, or throws.
  virtual std::vector<Completion> complete(std::string_view prompt, const SamplingConfig& config) = 0;
};

// Replays completions keyed by fingerprint. Lines are
// {"fingerprint": hex, "completions": [str, ...]} with an optional parallel
// "finish_reasons" array.
class MockBackend : public Backend {
 public:
  static MockBackend parse(std::istream& in);
  static MockBackend load(const std::filesystem::path& path);

  std::vector<Completion> complete(std::string_view prompt, const SamplingConfig& config) override;
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, std::vector<Completion>> entries_;
};

struct HttpBackendOptions {
  std::string base_url;  // scheme://host[:port][/prefix]
  std::string model;
  std::string api_key;   // bearer token; empty sends no Authorization header
  int retry_limit = 3;
  int initial_backoff_ms = 500;
  int timeout_seconds = 600;
  // Issue n_samples single-sample requests with seed = base + sample_index,
  // for servers that ignore "n".
  bool per_sample_requests = false;
};

// OpenAI-compatible POST {base_url}/v1/completions. Network errors, 429 and
// 5xx are retried with exponential backoff; other statuses fail at once.
class HttpBackend : public Backend {
 public:
  using LogSink = std::function<void(const std::string&)>;

  explicit HttpBackend(HttpBackendOptions options, LogSink log = {});

  std::vector<Completion> complete(std::string_view prompt, const SamplingConfig& config) override;

  std::uint64_t attempts() const { return attempts_.load(); }

 private:
  std::vector<Completion> request(std::string_view prompt, const SamplingConfig& config, int n,
                                  std::int64_t seed);

  HttpBackendOptions options_;
  std::string scheme_host_port_;
  std::string path_prefix_;
  LogSink log_;
  std::atomic<std::uint64_t> attempts_{0};
};

std::string api_key_from_environment();

// Append-only fingerprint cache that makes interrupted stages resumable.
// The file uses the mock fixture layout, so a finished cache replays as one.
class ResponseCache {
 public:
  // Loads existing entries when `resume`; otherwise truncates the file.
  ResponseCache(std::filesystem::path path, bool resume);

  std::optional<std::vector<Completion>> lookup(const std::string& fp) const;
  void store(const std::string& fp, const std::vector<Completion>& completions);

 private:
  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::map<std::string, std::vector<Completion>> entries_;
};

// Concurrent calls for one fingerprint share a single backend request.
class InferenceGateway {
 public:
  explicit InferenceGateway(std::shared_ptr<Backend> backend, std::shared_ptr<ResponseCache> cache = nullptr);

  std::vector<Completion> generate(const AssembledPrompt& prompt, const SamplingConfig& config);
  std::vector<Completion> generate_text(std::string_view prompt, const SamplingConfig& config);

  std::uint64_t backend_requests() const { return backend_requests_.load(); }
  std::uint64_t cache_hits() const { return cache_hits_.load(); }

 private:
  std::shared_ptr<Backend> backend_;
  std::shared_ptr<ResponseCache> cache_;
  std::mutex inflight_mutex_;
  std::map<std::string, std::shared_future<std::vector<Completion>>> inflight_;
  std::atomic<std::uint64_t> backend_requests_{0};
  std::atomic<std::uint64_t> cache_hits_{0};
};

}  // namespace latentprobe
