#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include "latentprobe/inference_gateway.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "json.hpp"
#include "latentprobe/error.hpp"
#include "latentprobe/hashing.hpp"

namespace latentprobe {

using json = nlohmann::json;

SamplingConfig SamplingConfig::defaults_for(Dataset dataset) {
  SamplingConfig config;
  config.max_tokens = dataset == Dataset::kAime ? 16384 : 4096;
  return config;
}

void SamplingConfig::validate() const {
  if (!(temperature >= 0.0)) throw ConfigError("sampling.temperature must be >= 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("sampling.top_p must be in (0, 1]");
  if (max_tokens < 1) throw ConfigError("sampling.max_tokens must be >= 1");
  if (n_samples < 1) throw ConfigError("sampling.n_samples must be >= 1");
}

std::string_view to_string(FinishReason reason) {
  switch (reason) {
    case FinishReason::kStop:
      return "stop";
    case FinishReason::kLength:
      return "length";
    case FinishReason::kError:
      return "error";
  }
  return "error";
}

FinishReason parse_finish_reason(std::string_view name) {
  if (name == "stop" || name == "eos") return FinishReason::kStop;
  if (name == "length") return FinishReason::kLength;
  return FinishReason::kError;
}

namespace {

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<Completion> completions_from_json(const json& row) {
  const auto& texts = row.at("completions");
  std::vector<Completion> out;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    Completion c;
    c.text = texts[i].get<std::string>();
    c.sample_index = static_cast<int>(i);
    if (auto it = row.find("finish_reasons"); it != row.end() && i < it->size()) {
      c.finish_reason = parse_finish_reason((*it)[i].get<std::string>());
    }
    out.push_back(std::move(c));
  }
  return out;
}

json completions_to_json(const std::string& fp, const std::vector<Completion>& completions) {
  json texts = json::array();
  json reasons = json::array();
  for (const Completion& c : completions) {
    texts.push_back(c.text);
    reasons.push_back(std::string(to_string(c.finish_reason)));
  }
  return {{"fingerprint", fp}, {"completions", texts}, {"finish_reasons", reasons}};
}

using Entries = std::map<std::string, std::vector<Completion>>;

Entries parse_entries(std::istream& in) {
  Entries entries;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json row = json::parse(line);
      entries[row.at("fingerprint").get<std::string>()] = completions_from_json(row);
    } catch (const json::exception& e) {
      throw ValidationError("fixture line " + std::to_string(number) + ": " + e.what());
    }
  }
  return entries;
}

}  // namespace

std::string fingerprint(std::string_view prompt_text, const SamplingConfig& config) {
  std::string material = "latentprobe-fingerprint-v1\n";
  material += "prompt:" + std::to_string(prompt_text.size()) + ":";
  material += prompt_text;
  material += "\ntemperature:" + shortest(config.temperature);
  material += "\ntop_p:" + shortest(config.top_p);
  material += "\nseed:" + std::to_string(config.seed);
  material += "\nmax_tokens:" + std::to_string(config.max_tokens);
  material += "\nn_samples:" + std::to_string(config.n_samples);
  material += "\n";
  return sha256_hex(material);
}

std::string fingerprint(const AssembledPrompt& prompt, const SamplingConfig& config) {
  return fingerprint(prompt.text, config);
}

MockBackend MockBackend::parse(std::istream& in) {
  MockBackend backend;
  backend.entries_ = parse_entries(in);
  return backend;
}

MockBackend MockBackend::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open mock fixture " + path.string());
  return parse(in);
}

std::vector<Completion> MockBackend::complete(std::string_view prompt, const SamplingConfig& config) {
  const std::string fp = fingerprint(prompt, config);
  auto it = entries_.find(fp);
  if (it == entries_.end()) throw BackendError("mock miss: fingerprint " + fp + " not in fixture");
  if (it->second.size() < static_cast<std::size_t>(config.n_samples)) {
    throw BackendError("mock fixture entry " + fp + " holds " + std::to_string(it->second.size()) +
                       " completions, " + std::to_string(config.n_samples) + " requested");
  }
  return {it->second.begin(), it->second.begin() + config.n_samples};
}

HttpBackend::HttpBackend(HttpBackendOptions options, LogSink log)
    : options_(std::move(options)), log_(std::move(log)) {
  const std::size_t scheme_end = options_.base_url.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("backend base_url '" + options_.base_url + "' lacks a scheme");
  }
  const std::size_t path_start = options_.base_url.find('/', scheme_end + 3);
  scheme_host_port_ = options_.base_url.substr(0, path_start);
  if (path_start != std::string::npos) {
    path_prefix_ = options_.base_url.substr(path_start);
    while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
  }
  if (options_.retry_limit < 0) throw ConfigError("retry_limit must be >= 0");
}

std::vector<Completion> HttpBackend::complete(std::string_view prompt, const SamplingConfig& config) {
  if (!options_.per_sample_requests) {
    return request(prompt, config, config.n_samples, config.seed);
  }
  std::vector<Completion> out;
  for (int i = 0; i < config.n_samples; ++i) {
    auto one = request(prompt, config, 1, config.seed + i);
    one.front().sample_index = i;
    out.push_back(std::move(one.front()));
  }
  return out;
}

std::vector<Completion> HttpBackend::request(std::string_view prompt, const SamplingConfig& config, int n,
                                             std::int64_t seed) {
  const json body = {
      {"model", options_.model},     {"prompt", prompt},  {"temperature", config.temperature},
      {"top_p", config.top_p},       {"seed", seed},      {"max_tokens", config.max_tokens},
      {"n", n},
  };
  const std::string payload = body.dump();
  const std::string path = path_prefix_ + "/v1/completions";

  std::string last_error;
  int backoff_ms = options_.initial_backoff_ms;
  for (int attempt = 0; attempt <= options_.retry_limit; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms));
      backoff_ms *= 2;
    }
    ++attempts_;
    httplib::Client client(scheme_host_port_);
    client.set_connection_timeout(std::chrono::seconds(30));
    client.set_read_timeout(std::chrono::seconds(options_.timeout_seconds));
    httplib::Headers headers;
    if (!options_.api_key.empty()) headers.emplace("Authorization", "Bearer " + options_.api_key);

    auto res = client.Post(path, headers, payload, "application/json");
    if (!res) {
      last_error = "network error: " + httplib::to_string(res.error());
    } else if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
    } else if (res->status < 200 || res->status >= 300) {
      throw BackendError("HTTP " + std::to_string(res->status) + " from " + scheme_host_port_ + path + ": " +
                         res->body.substr(0, 200));
    } else {
      json reply;
      try {
        reply = json::parse(res->body);
        std::vector<Completion> out;
        for (const auto& choice : reply.at("choices")) {
          Completion c;
          c.text = choice.at("text").get<std::string>();
          c.sample_index = choice.value("index", static_cast<int>(out.size()));
          const auto reason = choice.find("finish_reason");
          c.finish_reason = reason != choice.end() && reason->is_string()
                                ? parse_finish_reason(reason->get<std::string>())
                                : FinishReason::kStop;
          out.push_back(std::move(c));
        }
        std::sort(out.begin(), out.end(),
                  [](const Completion& a, const Completion& b) { return a.sample_index < b.sample_index; });
        if (out.size() != static_cast<std::size_t>(n)) {
          throw BackendError("expected " + std::to_string(n) + " choices, got " + std::to_string(out.size()) +
                             " (set per_sample_requests if the server ignores n)");
        }
        for (int i = 0; i < n; ++i) out[i].sample_index = i;
        if (log_) log_("POST " + path + " ok after " + std::to_string(attempt + 1) + " attempt(s)");
        return out;
      } catch (const json::exception& e) {
        throw BackendError(std::string("malformed completion response: ") + e.what());
      }
    }
    if (log_) log_("POST " + path + " attempt " + std::to_string(attempt + 1) + " failed: " + last_error);
  }
  throw BackendError("giving up after " + std::to_string(options_.retry_limit + 1) + " attempts: " + last_error);
}

std::string api_key_from_environment() {
  const char* key = std::getenv("LATENTPROBE_API_KEY");
  return key ? std::string(key) : std::string();
}

ResponseCache::ResponseCache(std::filesystem::path path, bool resume) : path_(std::move(path)) {
  if (resume && std::filesystem::exists(path_)) {
    std::ifstream in(path_, std::ios::binary);
    entries_ = parse_entries(in);
  } else {
    std::ofstream truncate(path_, std::ios::binary | std::ios::trunc);
    if (!truncate) throw ConfigError("cannot write cache " + path_.string());
  }
}

std::optional<std::vector<Completion>> ResponseCache::lookup(const std::string& fp) const {
  std::lock_guard lock(mutex_);
  auto it = entries_.find(fp);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void ResponseCache::store(const std::string& fp, const std::vector<Completion>& completions) {
  std::lock_guard lock(mutex_);
  if (!entries_.emplace(fp, completions).second) return;
  std::ofstream out(path_, std::ios::binary | std::ios::app);
  out << completions_to_json(fp, completions).dump() << '\n';
}

InferenceGateway::InferenceGateway(std::shared_ptr<Backend> backend, std::shared_ptr<ResponseCache> cache)
    : backend_(std::move(backend)), cache_(std::move(cache)) {}

std::vector<Completion> InferenceGateway::generate(const AssembledPrompt& prompt, const SamplingConfig& config) {
  return generate_text(prompt.text, config);
}

std::vector<Completion> InferenceGateway::generate_text(std::string_view prompt, const SamplingConfig& config) {
  config.validate();
  const std::string fp = fingerprint(prompt, config);
  const auto usable = [&](const std::vector<Completion>& c) {
    return c.size() == static_cast<std::size_t>(config.n_samples);
  };

  std::promise<std::vector<Completion>> promise;
  {
    std::unique_lock lock(inflight_mutex_);
    if (cache_) {
      if (auto hit = cache_->lookup(fp); hit && usable(*hit)) {
        ++cache_hits_;
        return *hit;
      }
    }
    if (auto it = inflight_.find(fp); it != inflight_.end()) {
      auto pending = it->second;
      lock.unlock();
      ++cache_hits_;
      return pending.get();
    }
    inflight_.emplace(fp, promise.get_future().share());
  }

  const auto finish = [&] {
    std::lock_guard lock(inflight_mutex_);
    inflight_.erase(fp);
  };
  try {
    ++backend_requests_;
    auto completions = backend_->complete(prompt, config);
    if (!usable(completions)) {
      throw BackendError("backend returned " + std::to_string(completions.size()) + " completions, expected " +
                         std::to_string(config.n_samples));
    }
    if (cache_) cache_->store(fp, completions);
    promise.set_value(completions);
    finish();
    return completions;
  } catch (...) {
    promise.set_exception(std::current_exception());
    finish();
    throw;
  }
}

}  // namespace latentprobe
