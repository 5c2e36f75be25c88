#include <algorithm>
#include <thread>

#include "decomp/lm.hpp"
#include "httplib.h"

namespace decomp::lm {

using trace::Value;

void RemoteAgent::Slots::acquire() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return free_ > 0; });
  --free_;
}

void RemoteAgent::Slots::release() {
  {
    std::lock_guard lock(mu_);
    ++free_;
  }
  cv_.notify_one();
}

RemoteAgent::RemoteAgent(RemoteConfig config) : config_(std::move(config)), slots_(config_.concurrency_limit) {}

namespace {

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;    // base path without trailing slash
};

Endpoint split_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw UsageError("endpoint must include a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  Endpoint e;
  e.origin = url.substr(0, path_start);
  e.path = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!e.path.empty() && e.path.back() == '/') e.path.pop_back();
  return e;
}

}  // namespace

CompletionResponse parse_completion_body(std::string_view body, std::optional<std::size_t> echo_prompt_bytes) {
  Value doc;
  try {
    doc = Value::parse(body.begin(), body.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw TransportError(std::string("malformed completion response: ") + e.what(), 200);
  }
  try {
    const Value& choice = doc.at("choices").at(0);
    CompletionResponse r;
    const Value& logprobs = choice.contains("logprobs") ? choice["logprobs"] : Value(nullptr);
    if (!echo_prompt_bytes) {
      r.text = choice.at("text").get<std::string>();
      if (logprobs.is_object()) {
        r.tokens = logprobs.at("tokens").get<std::vector<std::string>>();
        for (const auto& lp : logprobs.at("token_logprobs")) r.token_logprobs.push_back(lp.is_null() ? 0.0 : lp.get<double>());
        std::string joined;
        for (const auto& t : r.tokens) joined += t;
        // Some servers report logprobs for tokens past the stop sequence; keep text authoritative.
        if (joined != r.text) {
          r.tokens.clear();
          r.token_logprobs.clear();
        }
      }
      return r;
    }
    if (!logprobs.is_object()) throw TransportError("echo response carries no logprobs", 200);
    const auto tokens = logprobs.at("tokens").get<std::vector<std::string>>();
    const auto offsets = logprobs.at("text_offset").get<std::vector<std::size_t>>();
    const Value& lps = logprobs.at("token_logprobs");
    for (std::size_t i = 0; i < tokens.size() && i < offsets.size(); ++i) {
      if (offsets[i] < *echo_prompt_bytes) continue;
      r.tokens.push_back(tokens[i]);
      r.token_logprobs.push_back(lps.at(i).is_null() ? 0.0 : std::min(0.0, lps.at(i).get<double>()));
      r.text += tokens[i];
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(std::string("unexpected completion response shape: ") + e.what(), 200);
  }
}

CompletionResponse RemoteAgent::complete(const CompletionRequest& request) {
  if (request.prompt.empty()) throw ValidationError("completion prompt must be nonempty");
  const Endpoint ep = split_endpoint(config_.endpoint);

  Value body = Value::object();
  body["model"] = config_.model;
  body["temperature"] = request.temperature;
  body["logprobs"] = 0;
  std::optional<std::size_t> echo_bytes;
  if (request.echo()) {
    body["prompt"] = request.prompt + *request.echo_suffix;
    body["max_tokens"] = 0;
    body["echo"] = true;
    echo_bytes = request.prompt.size();
  } else {
    body["prompt"] = request.prompt;
    body["max_tokens"] = request.max_tokens;
    if (!request.stop.empty()) body["stop"] = request.stop;
  }
  const std::string payload = body.dump();

  slots_.acquire();
  struct Release {
    Slots& s;
    ~Release() { s.release(); }
  } release{slots_};

  httplib::Client client(ep.origin);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(config_.timeout).count());
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(config_.timeout).count());
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

  int last_status = 0;
  std::string last_error;
  const int attempts = std::max(1, config_.max_attempts);
  for (int attempt = 0; attempt < attempts; ++attempt) {
    if (attempt > 0) {
      auto delay = config_.backoff_base * (1LL << std::min(attempt - 1, 20));
      std::this_thread::sleep_for(std::min<std::chrono::milliseconds>(delay, config_.backoff_cap));
    }
    auto res = client.Post(ep.path + "/completions", headers, payload, "application/json");
    if (!res) {
      last_status = 0;
      last_error = "connection failed: " + httplib::to_string(res.error());
      continue;
    }
    last_status = res->status;
    if (res->status == 200) return parse_completion_body(res->body, echo_bytes);
    if (res->status == 401 || res->status == 403) {
      throw AuthError("completion endpoint rejected credentials (HTTP " + std::to_string(res->status) + ")",
                      res->status);
    }
    last_error = "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
    if (res->status == 429 || res->status >= 500) continue;
    throw TransportError("completion request failed: " + last_error, res->status);
  }
  if (last_status == 429) throw QuotaError("rate limit or quota exhausted: " + last_error, 429);
  throw TransportError("completion request failed after " + std::to_string(attempts) + " attempts: " + last_error,
                       last_status);
}

}  // namespace decomp::lm
