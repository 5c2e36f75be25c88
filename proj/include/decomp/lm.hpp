#pragma once

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "decomp/errors.hpp"
#include "decomp/prompts.hpp"
#include "decomp/trace.hpp"

namespace decomp::lm {

inline constexpr std::string_view kNotMentioned = "The answer to the question is not mentioned in the excerpt";

struct CompletionRequest {
  std::string prompt;
  int max_tokens = 256;
  double temperature = 0.0;
  std::vector<std::string> stop;
  // When set, the backend scores prompt + suffix and returns log-probabilities
  // for the suffix tokens only. Nothing is sampled.
  std::optional<std::string> echo_suffix;
  // Optional "<op>/<unit>" key used by fixture stores that allow route fallback.
  std::string route;

  bool echo() const { return echo_suffix.has_value(); }
  trace::Value params() const;
};

struct CompletionResponse {
  std::string text;
  std::vector<std::string> tokens;
  std::vector<double> token_logprobs;

  // Throws ValidationError on mismatched lengths, positive log-probabilities,
  // or tokens that do not concatenate to `text`.
  void validate() const;

  friend bool operator==(const CompletionResponse&, const CompletionResponse&) = default;
};

class FixtureMissing : public Error {
 public:
  explicit FixtureMissing(std::string digest)
      : Error("no fixture for prompt sha256 " + digest), digest_(std::move(digest)) {}
  const std::string& digest() const { return digest_; }

 private:
  std::string digest_;
};

class TransportError : public Error {
 public:
  TransportError(const std::string& what, int status) : Error(what), status_(status) {}
  // HTTP status, or 0 when no response was received.
  int status() const { return status_; }

 private:
  int status_;
};

class AuthError : public TransportError {
 public:
  using TransportError::TransportError;
};

class QuotaError : public TransportError {
 public:
  using TransportError::TransportError;
};

class Agent {
 public:
  virtual ~Agent() = default;
  virtual CompletionResponse complete(const CompletionRequest& request) = 0;
};

// exp of the mean token log-probability, i.e. the geometric mean of the
// token probabilities. Throws DomainError on empty input or entries > 0.
double inverse_perplexity(std::span<const double> token_logprobs);

// Budgeting estimate only: ceil(words * 4 / 3).
std::size_t estimate_tokens(std::string_view text);

std::string sha256_hex(std::string_view data);
// Trailing whitespace removed.
std::string normalize_prompt(std::string_view prompt);

// Splits `text` into word tokens that keep their leading whitespace, so the
// tokens always concatenate back to `text`.
std::vector<std::string> whitespace_tokens(std::string_view text);

enum class MatchPolicy { exact, exact_then_route };

// Directory of JSON fixture files. Each file holds one fixture object or an
// array of them: {prompt_sha256, prompt, params, text, tokens, token_logprobs}
// for exact matches, or {route, text, tokens, token_logprobs} for fallbacks.
class FixtureStore {
 public:
  explicit FixtureStore(std::filesystem::path dir);

  std::optional<CompletionResponse> lookup(const CompletionRequest& request, MatchPolicy policy) const;
  // Adds an exact-match fixture and writes it to its own file.
  void add(const CompletionRequest& request, const CompletionResponse& response);

  std::size_t size() const;
  const std::filesystem::path& directory() const { return dir_; }

  static std::string key(const CompletionRequest& request);
  static trace::Value fixture_json(const CompletionRequest& request, const CompletionResponse& response);

 private:
  void load();

  std::filesystem::path dir_;
  mutable std::mutex mu_;
  std::map<std::string, CompletionResponse> exact_;
  std::map<std::string, CompletionResponse> routes_;
};

class FixtureAgent : public Agent {
 public:
  FixtureAgent(std::shared_ptr<FixtureStore> store, MatchPolicy policy);
  CompletionResponse complete(const CompletionRequest& request) override;

 private:
  std::shared_ptr<FixtureStore> store_;
  MatchPolicy policy_;
};

// Forwards to another agent and appends every response to a fixture store.
class RecordingAgent : public Agent {
 public:
  RecordingAgent(std::shared_ptr<Agent> inner, std::shared_ptr<FixtureStore> store);
  CompletionResponse complete(const CompletionRequest& request) override;

 private:
  std::shared_ptr<Agent> inner_;
  std::shared_ptr<FixtureStore> store_;
};

class CallbackAgent : public Agent {
 public:
  using Fn = std::function<CompletionResponse(const CompletionRequest&)>;
  explicit CallbackAgent(Fn fn) : fn_(std::move(fn)) {}
  CompletionResponse complete(const CompletionRequest& request) override { return fn_(request); }

 private:
  Fn fn_;
};

// Deterministic rule-based backend used to author fixture stores for test
// corpora. Rules are tried in order; the first whose `when` substrings all
// occur in the prompt answers. Rule kinds:
//   {"when": [...], "text": "..."}             completion
//   {"when": [...], "echo_logprob": -4.6}      echo scoring, same value per token
//   {"when": [...], "echo_logprobs": [...]}    echo scoring, explicit vector
//   {"when": [...], "prefer": ["m1", "m2"]}    pairwise paragraph comparison
// Unmatched echo requests score every token at `echo_default_logprob`;
// unmatched completions throw FixtureMissing.
class ScriptedAgent : public Agent {
 public:
  explicit ScriptedAgent(trace::Value script);
  static ScriptedAgent from_file(const std::filesystem::path& path);

  CompletionResponse complete(const CompletionRequest& request) override;

 private:
  trace::Value rules_;
  double echo_default_ = -0.001;
};

struct RemoteConfig {
  std::string endpoint = "https://api.openai.com/v1";
  std::string model = "text-davinci-002";
  std::string api_key;
  int max_attempts = 5;
  std::chrono::milliseconds backoff_base{500};
  std::chrono::milliseconds backoff_cap{8000};
  std::chrono::seconds timeout{120};
  int concurrency_limit = 4;
};

// OpenAI-compatible /completions client. Connection failures, 5xx and 429
// responses are retried with exponential backoff; 401/403 fail immediately.
class RemoteAgent : public Agent {
 public:
  explicit RemoteAgent(RemoteConfig config);
  CompletionResponse complete(const CompletionRequest& request) override;

  const RemoteConfig& config() const { return config_; }

 private:
  class Slots {
   public:
    explicit Slots(int n) : free_(n < 1 ? 1 : n) {}
    void acquire();
    void release();

   private:
    std::mutex mu_;
    std::condition_variable cv_;
    int free_;
  };

  RemoteConfig config_;
  Slots slots_;
};

// Parses an OpenAI completions response body. For echo requests only the
// tokens at or after `prompt_bytes` are kept.
CompletionResponse parse_completion_body(std::string_view body, std::optional<std::size_t> echo_prompt_bytes);

struct AgentSpec {
  enum class Kind { remote, fixture, scripted };

  Kind kind = Kind::fixture;
  RemoteConfig remote;
  std::filesystem::path fixture_dir;
  MatchPolicy match_policy = MatchPolicy::exact;
  std::filesystem::path script_path;
  // Record every backend response into fixture_dir.
  bool record = false;
};

std::shared_ptr<Agent> make_agent(const AgentSpec& spec);

struct NotMentionedScore {
  double score = 0.0;
  prompts::Rendered prompt;
  CompletionResponse response;
};

// Scores how confidently the model completes the excerpt prompt with the
// canonical not-mentioned sentence. Low scores mean the excerpt likely
// answers the question. The template needs {{question}} and {{paragraph}}.
NotMentionedScore score_not_mentioned_detailed(Agent& agent, std::string_view excerpt, std::string_view question,
                                               const prompts::Template& tmpl, std::string route = {});
double score_not_mentioned(Agent& agent, std::string_view excerpt, std::string_view question,
                           const prompts::Template& tmpl);

}  // namespace decomp::lm
