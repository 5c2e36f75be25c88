#include "decomp/lm.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

namespace decomp::lm {

using trace::Value;

Value CompletionRequest::params() const {
  Value p = Value::object();
  p["max_tokens"] = max_tokens;
  p["temperature"] = temperature;
  p["stop"] = stop;
  p["echo_suffix"] = echo_suffix ? Value(*echo_suffix) : Value(nullptr);
  return p;
}

void CompletionResponse::validate() const {
  if (tokens.size() != token_logprobs.size()) {
    throw ValidationError("completion: tokens and token_logprobs differ in length");
  }
  for (double lp : token_logprobs) {
    if (!(lp <= 0.0)) throw ValidationError("completion: token log-probability must be <= 0");
  }
  std::string joined;
  for (const auto& t : tokens) joined += t;
  if (!tokens.empty() && joined != text) throw ValidationError("completion: tokens do not concatenate to text");
}

double inverse_perplexity(std::span<const double> token_logprobs) {
  if (token_logprobs.empty()) throw DomainError("inverse_perplexity: empty token sequence");
  double sum = 0.0;
  for (double lp : token_logprobs) {
    if (!(lp <= 0.0)) throw DomainError("inverse_perplexity: log-probabilities must be <= 0");
    sum += lp;
  }
  return std::exp(sum / static_cast<double>(token_logprobs.size()));
}

std::size_t estimate_tokens(std::string_view text) {
  std::size_t words = 0;
  bool in_word = false;
  for (unsigned char ch : text) {
    const bool space = std::isspace(ch) != 0;
    if (!space && !in_word) ++words;
    in_word = !space;
  }
  return (words * 4 + 2) / 3;
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 digest failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

std::string normalize_prompt(std::string_view prompt) {
  auto end = prompt.find_last_not_of(" \t\r\n\f\v");
  return end == std::string_view::npos ? std::string() : std::string(prompt.substr(0, end + 1));
}

std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> out;
  auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const bool starts = i == 0 || (is_space(text[i]) && !is_space(text[i - 1]));
    if (starts) out.emplace_back();
    out.back() += text[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fixtures

namespace {

CompletionResponse response_from_json(const Value& j) {
  CompletionResponse r;
  r.text = j.at("text").get<std::string>();
  r.tokens = j.value("tokens", std::vector<std::string>{});
  r.token_logprobs = j.value("token_logprobs", std::vector<double>{});
  r.validate();
  return r;
}

std::string echo_part(const Value& suffix) {
  return suffix.is_string() ? "|echo:" + suffix.get<std::string>() : std::string();
}

void write_atomically(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

FixtureStore::FixtureStore(std::filesystem::path dir) : dir_(std::move(dir)) { load(); }

std::string FixtureStore::key(const CompletionRequest& request) {
  return sha256_hex(normalize_prompt(request.prompt)) +
         echo_part(request.echo_suffix ? Value(*request.echo_suffix) : Value(nullptr));
}

Value FixtureStore::fixture_json(const CompletionRequest& request, const CompletionResponse& response) {
  Value j = Value::object();
  j["prompt_sha256"] = sha256_hex(normalize_prompt(request.prompt));
  j["prompt"] = request.prompt;
  j["params"] = request.params();
  j["text"] = response.text;
  j["tokens"] = response.tokens;
  j["token_logprobs"] = response.token_logprobs;
  return j;
}

void FixtureStore::load() {
  if (!std::filesystem::exists(dir_)) return;
  if (!std::filesystem::is_directory(dir_)) throw ValidationError("fixture path is not a directory: " + dir_.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir_)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    Value doc;
    try {
      doc = Value::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("fixture " + f.string() + ": " + e.what(), e.byte);
    }
    const Value entries = doc.is_array() ? doc : Value::array({doc});
    for (const auto& j : entries) {
      try {
        if (j.contains("prompt_sha256")) {
          const auto digest = j["prompt_sha256"].get<std::string>();
          if (j.contains("prompt") && sha256_hex(normalize_prompt(j["prompt"].get<std::string>())) != digest) {
            throw ValidationError("prompt_sha256 does not match prompt");
          }
          const Value suffix = j.contains("params") ? j["params"].value("echo_suffix", Value(nullptr)) : Value(nullptr);
          exact_.insert_or_assign(digest + echo_part(suffix), response_from_json(j));
        } else if (j.contains("route")) {
          routes_.insert_or_assign(j["route"].get<std::string>(), response_from_json(j));
        } else {
          throw ValidationError("fixture needs prompt_sha256 or route");
        }
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError("fixture " + f.string() + ": " + e.what());
      } catch (const ValidationError& e) {
        throw ValidationError("fixture " + f.string() + ": " + e.what());
      }
    }
  }
}

std::optional<CompletionResponse> FixtureStore::lookup(const CompletionRequest& request, MatchPolicy policy) const {
  const std::string k = key(request);
  std::lock_guard lock(mu_);
  if (auto it = exact_.find(k); it != exact_.end()) return it->second;
  if (policy == MatchPolicy::exact_then_route && !request.route.empty()) {
    if (auto it = routes_.find(request.route); it != routes_.end()) return it->second;
  }
  return std::nullopt;
}

void FixtureStore::add(const CompletionRequest& request, const CompletionResponse& response) {
  const std::string k = key(request);
  const std::string name = sha256_hex(k).substr(0, 32) + ".json";
  std::lock_guard lock(mu_);
  exact_.insert_or_assign(k, response);
  std::filesystem::create_directories(dir_);
  write_atomically(dir_ / name, fixture_json(request, response).dump(2) + "\n");
}

std::size_t FixtureStore::size() const {
  std::lock_guard lock(mu_);
  return exact_.size() + routes_.size();
}

FixtureAgent::FixtureAgent(std::shared_ptr<FixtureStore> store, MatchPolicy policy)
    : store_(std::move(store)), policy_(policy) {}

CompletionResponse FixtureAgent::complete(const CompletionRequest& request) {
  if (request.prompt.empty()) throw ValidationError("completion prompt must be nonempty");
  if (auto r = store_->lookup(request, policy_)) return *r;
  throw FixtureMissing(sha256_hex(normalize_prompt(request.prompt)));
}

RecordingAgent::RecordingAgent(std::shared_ptr<Agent> inner, std::shared_ptr<FixtureStore> store)
    : inner_(std::move(inner)), store_(std::move(store)) {}

CompletionResponse RecordingAgent::complete(const CompletionRequest& request) {
  CompletionResponse r = inner_->complete(request);
  store_->add(request, r);
  return r;
}

// ---------------------------------------------------------------------------
// Scripted backend

ScriptedAgent::ScriptedAgent(Value script) {
  if (!script.is_object() || !script.contains("rules") || !script["rules"].is_array()) {
    throw ValidationError("script must be an object with a 'rules' array");
  }
  rules_ = script["rules"];
  echo_default_ = script.value("echo_default_logprob", -0.001);
  if (echo_default_ > 0.0) throw ValidationError("echo_default_logprob must be <= 0");
}

ScriptedAgent ScriptedAgent::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open script " + path.string());
  try {
    return ScriptedAgent(Value::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("script " + path.string() + ": " + e.what(), e.byte);
  }
}

namespace {

bool rule_matches(const Value& rule, std::string_view prompt) {
  for (const auto& needle : rule.value("when", Value::array())) {
    if (prompt.find(needle.get<std::string>()) == std::string_view::npos) return false;
  }
  return true;
}

std::size_t preference_rank(const Value& prefer, std::string_view section) {
  for (std::size_t i = 0; i < prefer.size(); ++i) {
    if (section.find(prefer[i].get<std::string>()) != std::string_view::npos) return i;
  }
  return prefer.size();
}

std::optional<std::string> pairwise_choice(const Value& prefer, std::string_view prompt) {
  static const std::regex header(R"(Which of paragraphs (\d+) and (\d+))");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_search(prompt.begin(), prompt.end(), m, header)) return std::nullopt;
  const std::string a = m[1].str();
  const std::string b = m[2].str();
  const auto pa = prompt.find("\nParagraph " + a + ": ");
  const auto pb = prompt.find("\nParagraph " + b + ": ", pa == std::string_view::npos ? 0 : pa + 1);
  if (pa == std::string_view::npos || pb == std::string_view::npos) return std::nullopt;
  const auto ra = preference_rank(prefer, prompt.substr(pa, pb - pa));
  const auto rb = preference_rank(prefer, prompt.substr(pb));
  return " Paragraph " + (rb < ra ? b : a);
}

}  // namespace

CompletionResponse ScriptedAgent::complete(const CompletionRequest& request) {
  if (request.prompt.empty()) throw ValidationError("completion prompt must be nonempty");
  for (const auto& rule : rules_) {
    const bool echo_rule = rule.contains("echo_logprob") || rule.contains("echo_logprobs");
    if (echo_rule != request.echo() || !rule_matches(rule, request.prompt)) continue;
    CompletionResponse r;
    if (request.echo()) {
      r.text = *request.echo_suffix;
      r.tokens = whitespace_tokens(r.text);
      if (rule.contains("echo_logprobs")) {
        r.token_logprobs = rule["echo_logprobs"].get<std::vector<double>>();
      } else {
        r.token_logprobs.assign(r.tokens.size(), rule["echo_logprob"].get<double>());
      }
    } else if (rule.contains("prefer")) {
      auto choice = pairwise_choice(rule["prefer"], request.prompt);
      if (!choice) continue;
      r.text = *choice;
    } else {
      r.text = rule.at("text").get<std::string>();
    }
    r.validate();
    return r;
  }
  if (request.echo()) {
    CompletionResponse r;
    r.text = *request.echo_suffix;
    r.tokens = whitespace_tokens(r.text);
    r.token_logprobs.assign(r.tokens.size(), echo_default_);
    return r;
  }
  throw FixtureMissing(sha256_hex(normalize_prompt(request.prompt)));
}

// ---------------------------------------------------------------------------

std::shared_ptr<Agent> make_agent(const AgentSpec& spec) {
  std::shared_ptr<Agent> backend;
  switch (spec.kind) {
    case AgentSpec::Kind::fixture:
      if (spec.record) throw UsageError("record mode needs a remote or scripted backend");
      return std::make_shared<FixtureAgent>(std::make_shared<FixtureStore>(spec.fixture_dir), spec.match_policy);
    case AgentSpec::Kind::remote:
      backend = std::make_shared<RemoteAgent>(spec.remote);
      break;
    case AgentSpec::Kind::scripted:
      backend = std::make_shared<ScriptedAgent>(ScriptedAgent::from_file(spec.script_path));
      break;
  }
  if (spec.record) {
    if (spec.fixture_dir.empty()) throw UsageError("record mode needs a fixture directory");
    return std::make_shared<RecordingAgent>(backend, std::make_shared<FixtureStore>(spec.fixture_dir));
  }
  return backend;
}

NotMentionedScore score_not_mentioned_detailed(Agent& agent, std::string_view excerpt, std::string_view question,
                                               const prompts::Template& tmpl, std::string route) {
  if (!tmpl.has_slot("question") || !tmpl.has_slot("paragraph")) {
    throw ValidationError("not-mentioned template needs {{question}} and {{paragraph}} slots");
  }
  NotMentionedScore out;
  out.prompt = tmpl.render({{"question", std::string(question)}, {"paragraph", std::string(excerpt)}});
  CompletionRequest req;
  req.prompt = out.prompt.text;
  req.max_tokens = 0;
  req.temperature = 0.0;
  req.echo_suffix = " " + std::string(kNotMentioned);
  req.route = std::move(route);
  out.response = agent.complete(req);
  out.response.validate();
  out.score = inverse_perplexity(out.response.token_logprobs);
  return out;
}

double score_not_mentioned(Agent& agent, std::string_view excerpt, std::string_view question,
                           const prompts::Template& tmpl) {
  return score_not_mentioned_detailed(agent, excerpt, question, tmpl).score;
}

}  // namespace decomp::lm
