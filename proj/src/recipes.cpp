#include "decomp/recipes.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <unordered_map>

#include "decomp/parallel.hpp"
#include "recipes_internal.hpp"

namespace decomp::recipes {

using detail::call_lm;
using detail::guarded;
using detail::join;
using detail::trim;

namespace detail {

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

LmCall call_lm(const RunContext& ctx, std::string name, const prompts::Rendered& prompt, std::string route,
               int max_tokens) {
  trace::Scope scope(ctx.recorder, std::move(name), {{"prompt", prompt.text}, {"max_tokens", max_tokens}}, ctx.parent);
  scope.prompt(prompt.structure, prompt.text);
  lm::CompletionRequest req;
  req.prompt = prompt.text;
  req.max_tokens = max_tokens;
  req.route = std::move(route);
  return guarded(scope, [&] {
    auto response = ctx.lm().complete(req);
    scope.finish(response.text);
    return LmCall{std::move(response), scope.id()};
  });
}

}  // namespace detail

void RunConfig::validate() const {
  if (!(perplexity_threshold > 0.0 && perplexity_threshold < 1.0)) {
    throw ValidationError("perplexity_threshold must lie in (0, 1)");
  }
  if (concurrency_limit < 1) throw ValidationError("concurrency_limit must be at least 1");
  if (top_k < 1) throw ValidationError("top_k must be at least 1");
  if (demos_per_prompt < 0) throw ValidationError("demos_per_prompt must not be negative");
  if (completion_tokens < 1) throw ValidationError("completion_tokens must be at least 1");
  if (context_tokens <= static_cast<std::size_t>(completion_tokens)) {
    throw ValidationError("context_tokens must exceed completion_tokens");
  }
}

Value RunConfig::to_json() const {
  Value j = Value::object();
  j["perplexity_threshold"] = perplexity_threshold;
  j["concurrency_limit"] = concurrency_limit;
  j["top_k"] = top_k;
  j["demos_per_prompt"] = demos_per_prompt;
  j["seed"] = seed;
  j["context_tokens"] = context_tokens;
  j["completion_tokens"] = completion_tokens;
  return j;
}

RunConfig RunConfig::from_json(const Value& j) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  RunConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "perplexity_threshold") {
        c.perplexity_threshold = v.get<double>();
      } else if (key == "concurrency_limit") {
        c.concurrency_limit = v.get<int>();
      } else if (key == "top_k") {
        c.top_k = v.get<int>();
      } else if (key == "demos_per_prompt") {
        c.demos_per_prompt = v.get<int>();
      } else if (key == "seed") {
        c.seed = v.get<std::uint64_t>();
      } else if (key == "context_tokens") {
        c.context_tokens = v.get<std::size_t>();
      } else if (key == "completion_tokens") {
        c.completion_tokens = v.get<int>();
      } else {
        throw ValidationError("unknown config key: " + key);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

RunContext RunContext::under(const trace::Scope& scope) const {
  RunContext c = *this;
  if (scope.id()) c.parent = scope.id();
  return c;
}

const RunConfig& RunContext::cfg() const {
  static const RunConfig defaults;
  return config ? *config : defaults;
}

const prompts::Template& RunContext::prompt(std::string_view name) const {
  return (prompts ? *prompts : prompts::PromptLibrary::builtin()).get(name);
}

lm::Agent& RunContext::lm() const {
  if (!agent) throw UsageError("no language model agent configured");
  return *agent;
}

std::string describe_arm_question(std::string_view arm) {
  return "Describe the trial arm \"" + std::string(arm) + "\": who was assigned to it and what did they receive?";
}

std::string flow_arms_question(std::string_view experiment) {
  return "What were the trial arms (subgroups of participants) of the experiment \"" + std::string(experiment) + "\"?";
}

std::string adherence_question(std::string_view experiment, std::string_view arm) {
  std::string q = "How many participants in the \"" + std::string(arm) + "\" arm";
  if (!experiment.empty()) q += " of the \"" + std::string(experiment) + "\" experiment";
  q += " completed the intervention, or at what rate did they adhere to it?";
  return q;
}

std::string flow_unit_id(std::string_view experiment, std::string_view arm) {
  return std::string(experiment) + "|" + std::string(arm);
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const lm::FixtureMissing*>(&e)) return "fixture_missing";
  if (dynamic_cast<const lm::AuthError*>(&e)) return "auth";
  if (dynamic_cast<const lm::QuotaError*>(&e)) return "quota";
  if (dynamic_cast<const lm::TransportError*>(&e)) return "transport";
  if (dynamic_cast<const ValidationError*>(&e)) return "validation";
  if (dynamic_cast<const UsageError*>(&e)) return "usage";
  if (dynamic_cast<const DomainError*>(&e)) return "domain";
  return "error";
}

Value Answer::to_json() const {
  Value j = Value::object();
  j["text"] = text;
  j["not_mentioned"] = not_mentioned;
  j["support"] = support;
  return j;
}

Answer not_mentioned_answer() {
  Answer a;
  a.text = std::string(lm::kNotMentioned);
  a.not_mentioned = true;
  return a;
}

bool is_not_mentioned(std::string_view completion) {
  static constexpr std::string_view stem = "the answer to the question is not mentioned";
  std::string t = trim(completion);
  if (t.empty()) return true;
  if (t.size() < stem.size()) return false;
  for (std::size_t i = 0; i < stem.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(t[i])) != stem[i]) return false;
  }
  return true;
}

namespace {

const std::set<std::string, std::less<>>& stopwords() {
  static const std::set<std::string, std::less<>> words = {
      "a",     "an",   "and",  "are",   "as",    "at",    "be",   "by",   "did",  "do",   "does", "for",
      "from",  "had",  "has",  "have",  "how",   "in",    "is",   "it",   "its",  "of",   "on",   "or",
      "that",  "the",  "their", "there", "these", "they",  "this", "to",   "was",  "were", "what", "when",
      "where", "which", "who",  "whom",  "why",   "with",  "if",   "any",  "used", "use",  "paper"};
  return words;
}

std::string stem(std::string w) {
  auto ends = [&](std::string_view suf) { return w.size() > suf.size() + 2 && w.ends_with(suf); };
  if (ends("ies")) {
    w.replace(w.size() - 3, 3, "y");
  } else if (ends("ing")) {
    w.resize(w.size() - 3);
  } else if (ends("ed")) {
    w.resize(w.size() - 2);
  } else if (ends("s") && !w.ends_with("ss")) {
    w.resize(w.size() - 1);
  }
  return w;
}

}  // namespace

std::vector<std::string> content_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty() && !stopwords().contains(cur)) out.push_back(stem(cur));
    cur.clear();
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

std::vector<double> lexical_scores(std::string_view question, std::span<const Paragraph* const> paragraphs) {
  std::vector<std::set<std::string>> bags;
  bags.reserve(paragraphs.size());
  std::map<std::string, std::size_t> df;
  for (const auto* p : paragraphs) {
    auto words = content_words(p->text);
    std::set<std::string> bag(words.begin(), words.end());
    for (const auto& w : bag) ++df[w];
    bags.push_back(std::move(bag));
  }
  auto qwords = content_words(question);
  std::set<std::string> qbag(qwords.begin(), qwords.end());
  const double n = static_cast<double>(paragraphs.size());
  std::vector<double> scores(paragraphs.size(), 0.0);
  for (const auto& w : qbag) {
    auto it = df.find(w);
    if (it == df.end()) continue;
    double idf = std::log((n + 1.0) / (static_cast<double>(it->second) + 1.0)) + 1.0;
    for (std::size_t i = 0; i < bags.size(); ++i) {
      if (bags[i].contains(w)) scores[i] += idf;
    }
  }
  return scores;
}

std::optional<std::string> select_top1(const Paper& paper, std::string_view question, const Scorer& scorer) {
  auto paras = paper.paragraphs();
  if (paras.empty()) return std::nullopt;
  auto scores = scorer(question, paras);
  if (scores.size() != paras.size()) throw ValidationError("scorer returned the wrong number of scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return paras[best]->para_id;
}

namespace {

prompts::Rendered qa_prompt(const RunContext& ctx, std::string_view question, std::string_view title,
                            const std::vector<const Paragraph*>& excerpts, const std::vector<Demonstration>& demos) {
  std::vector<std::string> texts;
  for (const auto* p : excerpts) texts.push_back(p->text);
  std::string body = join(texts, "\n\n");
  if (demos.empty()) {
    return ctx.prompt("baseline_qa")
        .render({{"question", std::string(question)}, {"title", std::string(title)}, {"paragraph", body}});
  }
  prompts::Rendered out;
  for (const auto& d : demos) {
    out = prompts::concat(std::move(out), ctx.prompt("qa_demonstration")
                                              .render({{"question", d.question},
                                                       {"paragraph", join(d.excerpts, "\n\n")},
                                                       {"answer", d.answer}}));
    out = prompts::concat(std::move(out), prompts::literal("\n\n"));
  }
  return prompts::concat(std::move(out), ctx.prompt("perplexity_classifier")
                                             .render({{"question", std::string(question)}, {"paragraph", body}}));
}

}  // namespace

Answer answer_from_excerpts(const RunContext& ctx, std::string_view question, std::string_view title,
                            std::vector<const Paragraph*> excerpts, const std::vector<Demonstration>& demos,
                            const std::vector<std::string>& ranking) {
  if (excerpts.empty()) return not_mentioned_answer();
  std::vector<std::string> ids;
  for (const auto* p : excerpts) ids.push_back(p->para_id);
  trace::Scope scope(ctx.recorder, "answer_from_excerpts",
                     {{"question", question}, {"excerpts", ids}, {"demonstrations", demos.size()}}, ctx.parent);
  return guarded(scope, [&] {
    // Lowest ranked last; excerpts missing from the ranking rank below it.
    std::vector<std::string> order;
    for (const auto& id : ranking) {
      if (std::find(ids.begin(), ids.end(), id) != ids.end()) order.push_back(id);
    }
    for (const auto& id : ids) {
      if (std::find(order.begin(), order.end(), id) == order.end()) order.push_back(id);
    }

    const auto& cfg = ctx.cfg();
    std::vector<Demonstration> kept_demos = demos;
    auto fits = [&](const prompts::Rendered& r) {
      return lm::estimate_tokens(r.text) + static_cast<std::size_t>(cfg.completion_tokens) <= cfg.context_tokens;
    };
    prompts::Rendered prompt = qa_prompt(ctx, question, title, excerpts, kept_demos);
    std::size_t dropped = 0;
    while (!fits(prompt)) {
      if (excerpts.size() > 1) {
        const std::string victim = order.back();
        order.pop_back();
        excerpts.erase(std::find_if(excerpts.begin(), excerpts.end(),
                                    [&](const Paragraph* p) { return p->para_id == victim; }));
        ++dropped;
      } else if (!kept_demos.empty()) {
        kept_demos.pop_back();
      } else {
        scope.value("over_budget", true);
        break;
      }
      prompt = qa_prompt(ctx, question, title, excerpts, kept_demos);
    }
    if (dropped) scope.value("dropped_excerpts", dropped);

    auto child = ctx.under(scope);
    auto call = call_lm(child, "answer", prompt, "answer", cfg.completion_tokens);
    Answer a;
    a.text = trim(call.response.text);
    for (const auto* p : excerpts) a.support.push_back(p->para_id);
    if (call.id) a.raw_calls.push_back(*call.id);
    if (is_not_mentioned(a.text)) {
      a.text = std::string(lm::kNotMentioned);
      a.not_mentioned = true;
    }
    scope.finish(a.to_json());
    return a;
  });
}

std::vector<ScoredParagraph> perplexity_scores(const RunContext& ctx, const Paper& paper, std::string_view question) {
  auto paras = paper.paragraphs();
  trace::Scope scope(ctx.recorder, "perplexity_scores",
                     {{"question", question}, {"paper_id", paper.paper_id}, {"paragraphs", paras.size()}}, ctx.parent);
  return guarded(scope, [&] {
    auto child = ctx.under(scope);
    const auto& tmpl = ctx.prompt("perplexity_classifier");
    auto scores = parallel_map(paras.size(), ctx.cfg().concurrency_limit, [&](std::size_t i) {
      const auto* p = paras[i];
      trace::Scope s(child.recorder, "score_not_mentioned", {{"para_id", p->para_id}}, child.parent);
      return guarded(s, [&] {
        auto r = lm::score_not_mentioned_detailed(child.lm(), p->text, question, tmpl, "score/" + p->para_id);
        s.prompt(r.prompt.structure, r.prompt.text);
        s.value("para_id", p->para_id);
        s.value("score", r.score);
        s.finish(r.score);
        return ScoredParagraph{p->para_id, r.score};
      });
    });
    Value out = Value::array();
    for (const auto& s : scores) out.push_back({s.para_id, s.score});
    scope.finish(out);
    return scores;
  });
}

std::vector<std::string> select_below(std::span<const ScoredParagraph> scores, double threshold) {
  std::vector<std::string> out;
  for (const auto& s : scores) {
    if (s.score < threshold) out.push_back(s.para_id);
  }
  return out;
}

std::vector<std::string> perplexity_select(const RunContext& ctx, const Paper& paper, std::string_view question) {
  trace::Scope scope(ctx.recorder, "perplexity_select", {{"question", question}, {"paper_id", paper.paper_id}},
                     ctx.parent);
  return guarded(scope, [&] {
    auto scores = perplexity_scores(ctx.under(scope), paper, question);
    auto selected = select_below(scores, ctx.cfg().perplexity_threshold);
    scope.finish(selected);
    return selected;
  });
}

std::vector<std::string> prune(const RunContext& ctx, const Paper& paper, std::string_view question,
                               const std::vector<std::string>& selected) {
  if (selected.empty()) return {};
  trace::Scope scope(ctx.recorder, "prune", {{"question", question}, {"selected", selected}}, ctx.parent);
  return guarded(scope, [&] {
    std::vector<std::string> listing;
    for (std::size_t i = 0; i < selected.size(); ++i) {
      const auto* p = paper.find(selected[i]);
      if (!p) throw ValidationError("prune: unknown paragraph " + selected[i]);
      listing.push_back("Paragraph " + std::to_string(i + 1) + ": " + p->text);
    }
    auto prompt = ctx.prompt("prune_select")
                      .render({{"paragraphs", join(listing, "\n\n")}, {"question", std::string(question)}});
    auto call = call_lm(ctx.under(scope), "prune_select", prompt, "prune", ctx.cfg().completion_tokens);

    std::set<std::size_t> picks;
    bool usable = true;
    const std::string& text = call.response.text;
    for (std::size_t i = 0; i < text.size();) {
      if (!std::isdigit(static_cast<unsigned char>(text[i]))) {
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
      std::size_t n = j - i > 6 ? 0 : std::stoul(text.substr(i, j - i));
      if (n < 1 || n > selected.size()) usable = false;
      picks.insert(n);
      i = j;
    }
    if (picks.empty()) usable = false;

    std::vector<std::string> out;
    if (!usable) {
      scope.value("prune_fallback", true);
      out = selected;
    } else {
      for (std::size_t n : picks) out.push_back(selected[n - 1]);
    }
    scope.finish(out);
    return out;
  });
}

std::vector<RankItem> rank_items(const Paper& paper) {
  std::vector<RankItem> items;
  auto paras = paper.paragraphs();
  for (std::size_t i = 0; i < paras.size(); ++i) items.push_back({paras[i]->para_id, paras[i]->text, i + 1});
  return items;
}

std::vector<RankItem> pairwise_rank(const RunContext& ctx, const std::vector<RankItem>& items,
                                    std::string_view question, int k) {
  if (k < 1) throw UsageError("pairwise_rank needs k >= 1");
  trace::Scope scope(ctx.recorder, "pairwise_rank", {{"question", question}, {"items", items.size()}, {"k", k}},
                     ctx.parent);
  return guarded(scope, [&] {
    auto child = ctx.under(scope);
    // (first id, second id) -> id named by the model, or empty when unparseable.
    std::map<std::pair<std::string, std::string>, std::string> memo;

    auto compare = [&](const RankItem& incumbent, const RankItem& challenger) -> const RankItem& {
      const bool inc_first = incumbent.number <= challenger.number;
      const RankItem& first = inc_first ? incumbent : challenger;
      const RankItem& second = inc_first ? challenger : incumbent;
      auto key = std::make_pair(first.id, second.id);
      auto it = memo.find(key);
      if (it == memo.end()) {
        trace::Scope s(child.recorder, "compare_paragraphs",
                       {{"first", first.number}, {"second", second.number}}, child.parent);
        std::string winner = guarded(s, [&] {
          auto prompt = child.prompt("pairwise_compare")
                            .render({{"first_number", std::to_string(first.number)},
                                     {"second_number", std::to_string(second.number)},
                                     {"question", std::string(question)},
                                     {"first_text", first.text},
                                     {"second_text", second.text}});
          auto call = call_lm(child.under(s), "compare", prompt, "compare", 16);
          std::string found;
          const std::string& t = call.response.text;
          for (std::size_t i = 0; i < t.size() && found.empty();) {
            if (!std::isdigit(static_cast<unsigned char>(t[i]))) {
              ++i;
              continue;
            }
            std::size_t j = i;
            while (j < t.size() && std::isdigit(static_cast<unsigned char>(t[j]))) ++j;
            std::string num = t.substr(i, j - i);
            if (num == std::to_string(first.number)) found = first.id;
            if (num == std::to_string(second.number)) found = second.id;
            i = j;
          }
          if (found.empty()) s.value("unparseable", true);
          s.finish(found.empty() ? Value(nullptr) : Value(found));
          return found;
        });
        it = memo.emplace(key, winner).first;
      }
      return it->second == challenger.id ? challenger : incumbent;
    };

    std::vector<RankItem> remaining = items;
    std::vector<RankItem> ranked;
    const std::size_t rounds = std::min(items.size(), static_cast<std::size_t>(k));
    for (std::size_t r = 0; r < rounds; ++r) {
      std::size_t champ = 0;
      for (std::size_t j = 1; j < remaining.size(); ++j) {
        if (&compare(remaining[champ], remaining[j]) == &remaining[j]) champ = j;
      }
      ranked.push_back(remaining[champ]);
      remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(champ));
    }
    Value out = Value::array();
    for (const auto& it : ranked) out.push_back(it.id);
    scope.finish(out);
    return ranked;
  });
}

std::string rank_answer(const RunContext& ctx, std::string_view question, std::vector<RankItem> items) {
  if (items.empty()) return {};
  std::sort(items.begin(), items.end(), [](const RankItem& a, const RankItem& b) { return a.number < b.number; });
  std::vector<std::string> listing;
  for (const auto& it : items) listing.push_back("Paragraph " + std::to_string(it.number) + ": " + it.text);
  auto prompt =
      ctx.prompt("rank_answer").render({{"question", std::string(question)}, {"paragraphs", join(listing, "\n\n")}});
  return trim(call_lm(ctx, "rank_answer", prompt, "rank_answer", ctx.cfg().completion_tokens).response.text);
}

Verdict parse_final_verdict(std::string_view completion) {
  std::string_view last;
  std::size_t pos = 0;
  while (pos <= completion.size()) {
    std::size_t nl = completion.find('\n', pos);
    if (nl == std::string_view::npos) nl = completion.size();
    auto line = completion.substr(pos, nl - pos);
    if (!trim(line).empty()) last = line;
    pos = nl + 1;
  }
  std::string word;
  auto check = [&]() -> std::optional<Verdict> {
    auto v = corpus::parse_verdict_word(word);
    word.clear();
    return v;
  };
  for (char ch : last) {
    if (std::isalpha(static_cast<unsigned char>(ch))) {
      word += ch;
    } else if (!word.empty()) {
      if (auto v = check()) return *v;
    }
  }
  if (!word.empty()) {
    if (auto v = check()) return *v;
  }
  return Verdict::unclear;
}

std::vector<std::string> parse_list(std::string_view text) {
  std::vector<std::string> raw;
  std::string cur;
  int depth = 0;
  for (char ch : text) {
    if (ch == '(' || ch == '[') ++depth;
    if ((ch == ')' || ch == ']') && depth > 0) --depth;
    if (ch == '\n' || ((ch == ';' || ch == ',') && depth == 0)) {
      raw.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  raw.push_back(cur);

  std::vector<std::string> out;
  std::set<std::string> seen;
  for (auto& item : raw) {
    std::string s = trim(item);
    // Leading bullets and enumerators: "-", "*", "1.", "2)", "(3)".
    while (!s.empty()) {
      if (s[0] == '-' || s[0] == '*') {
        s = trim(s.substr(1));
        continue;
      }
      std::size_t i = s[0] == '(' ? 1 : 0;
      std::size_t j = i;
      while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
      if (j > i && j < s.size() && (s[j] == '.' || s[j] == ')')) {
        s = trim(s.substr(j + 1));
        continue;
      }
      break;
    }
    while (!s.empty() && s.back() == '.') s.pop_back();
    s = trim(s);
    if (s.empty()) continue;
    std::string key;
    for (char c : s) key += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (seen.insert(key).second) out.push_back(s);
  }
  return out;
}

Verdict classify_paragraph_placebo(const RunContext& ctx, const Paragraph& paragraph) {
  trace::Scope scope(ctx.recorder, "classify_paragraph_placebo", {{"para_id", paragraph.para_id}}, ctx.parent);
  return guarded(scope, [&] {
    auto prompt = ctx.prompt("paragraph_placebo").render({{"paragraph", paragraph.text}});
    auto call = call_lm(ctx.under(scope), "paragraph_placebo", prompt, "paragraph_placebo/" + paragraph.para_id,
                        ctx.cfg().completion_tokens);
    Verdict v = parse_final_verdict(call.response.text);
    scope.value("para_id", paragraph.para_id);
    scope.value("classification", std::string(corpus::to_string(v)));
    scope.finish(std::string(corpus::to_string(v)));
    return v;
  });
}

Verdict aggregate_paragraph_votes(std::span<const Verdict> votes) {
  if (std::find(votes.begin(), votes.end(), Verdict::no) != votes.end()) return Verdict::no;
  if (std::find(votes.begin(), votes.end(), Verdict::yes) != votes.end()) return Verdict::yes;
  return Verdict::no;
}

Verdict arms_rule(Verdict looks_like_placebo, std::optional<Verdict> can_tell) {
  if (looks_like_placebo == Verdict::yes && can_tell == Verdict::yes) return Verdict::unclear;
  return looks_like_placebo;
}

Verdict ensemble_placebo(Verdict arms, Verdict paragraphs) {
  if (arms == Verdict::no || paragraphs == Verdict::no) return Verdict::no;
  if (arms == Verdict::yes || paragraphs == Verdict::yes) return Verdict::yes;
  return Verdict::no;
}

ArmsOutcome arms_pipeline(const RunContext& ctx, const Paper& paper) {
  trace::Scope scope(ctx.recorder, "arms_pipeline", {{"paper_id", paper.paper_id}}, ctx.parent);
  return guarded(scope, [&] {
    auto child = ctx.under(scope);
    const int k = ctx.cfg().top_k;
    auto items = rank_items(paper);
    ArmsOutcome out;

    auto top = pairwise_rank(child, items, kArmsQuestion, k);
    auto names = parse_list(rank_answer(child, kArmsQuestion, top));
    auto descriptions = parallel_map(names.size(), ctx.cfg().concurrency_limit, [&](std::size_t i) {
      auto q = describe_arm_question(names[i]);
      return rank_answer(child, q, pairwise_rank(child, items, q, k));
    });
    for (std::size_t i = 0; i < names.size(); ++i) out.arms.push_back({names[i], descriptions[i]});

    if (!out.arms.empty()) {
      std::vector<std::string> blocks;
      for (std::size_t i = 0; i < out.arms.size(); ++i) {
        auto n = std::to_string(i + 1);
        blocks.push_back("Arm " + n + ": " + out.arms[i].name + "\nDescription of arm " + n + ": " +
                         out.arms[i].description);
      }
      auto judgment = ctx.prompt("arms_placebo_judgment").render({{"arms", join(blocks, "\n\n")}});
      auto first = call_lm(child, "arms_placebo_judgment", judgment, "arms_judgment", ctx.cfg().completion_tokens);
      out.looks_like_placebo = parse_final_verdict(first.response.text);
      if (out.looks_like_placebo == Verdict::yes) {
        auto followup =
            ctx.prompt("arms_unblinding").render({{"judgment", judgment.text + first.response.text}});
        auto second = call_lm(child, "arms_unblinding", followup, "arms_unblinding", ctx.cfg().completion_tokens);
        out.can_tell = parse_final_verdict(second.response.text);
      }
    }
    out.verdict = arms_rule(out.looks_like_placebo, out.can_tell);

    Value arms = Value::array();
    for (const auto& a : out.arms) arms.push_back({{"name", a.name}, {"description", a.description}});
    scope.value("looks_like_placebo", std::string(corpus::to_string(out.looks_like_placebo)));
    if (out.can_tell) scope.value("can_tell", std::string(corpus::to_string(*out.can_tell)));
    scope.finish({{"arms", arms}, {"verdict", corpus::to_string(out.verdict)}});
    return out;
  });
}

std::optional<Answer> describe_placebo(const RunContext& ctx, const Paper& paper, Verdict classification) {
  if (classification != Verdict::yes) return std::nullopt;
  trace::Scope scope(ctx.recorder, "describe_placebo", {{"paper_id", paper.paper_id}}, ctx.parent);
  return guarded(scope, [&] {
    auto child = ctx.under(scope);
    auto top = pairwise_rank(child, rank_items(paper), kPlaceboQuestion, ctx.cfg().top_k);
    std::vector<std::string> ranking;
    std::vector<const Paragraph*> excerpts;
    for (const auto& it : top) ranking.push_back(it.id);
    for (const auto* p : paper.paragraphs()) {
      if (std::find(ranking.begin(), ranking.end(), p->para_id) != ranking.end()) excerpts.push_back(p);
    }
    auto a = answer_from_excerpts(child, kPlaceboQuestion, paper.title, excerpts, {}, ranking);
    scope.finish(a.to_json());
    return std::optional<Answer>(std::move(a));
  });
}

PlaceboResult placebo_decomposition(const RunContext& ctx, const Paper& paper) {
  trace::Scope scope(ctx.recorder, "placebo_decomposition", {{"paper_id", paper.paper_id}}, ctx.parent);
  return guarded(scope, [&] {
    auto child = ctx.under(scope);
    PlaceboResult r;
    r.arms = arms_pipeline(child, paper);
    auto paras = paper.paragraphs();
    r.paragraph_votes = parallel_map(paras.size(), ctx.cfg().concurrency_limit,
                                     [&](std::size_t i) { return classify_paragraph_placebo(child, *paras[i]); });
    r.paragraph_verdict = aggregate_paragraph_votes(r.paragraph_votes);
    r.verdict = ensemble_placebo(r.arms.verdict, r.paragraph_verdict);
    r.description = describe_placebo(child, paper, r.verdict);

    scope.value("paragraph_verdict", std::string(corpus::to_string(r.paragraph_verdict)));
    Value out = {{"verdict", corpus::to_string(r.verdict)}};
    out["description"] = r.description ? Value(r.description->text) : Value(nullptr);
    scope.finish(out);
    return r;
  });
}

const KeywordPatterns& KeywordPatterns::builtin() {
  static const KeywordPatterns p = from_json(Value::parse(prompts::detail::builtin_keyword_patterns()));
  return p;
}

KeywordPatterns KeywordPatterns::from_json(const Value& j) {
  KeywordPatterns p;
  auto compile = [&](const char* key, std::vector<std::regex>& dst) {
    if (!j.contains(key) || !j.at(key).is_array()) throw ValidationError(std::string("keyword patterns need ") + key);
    for (const auto& s : j.at(key)) {
      try {
        dst.emplace_back(s.get<std::string>(), std::regex::ECMAScript | std::regex::icase);
      } catch (const std::exception& e) {
        throw ValidationError("bad keyword pattern " + s.dump() + ": " + e.what());
      }
    }
  };
  compile("no_placebo", p.no_placebo);
  compile("placebo", p.placebo);
  return p;
}

PlaceboDecision keyword_decision_tree(const Paper& paper, const KeywordPatterns& patterns) {
  auto any = [](const std::vector<std::regex>& res, const std::string& text) {
    return std::any_of(res.begin(), res.end(), [&](const std::regex& re) { return std::regex_search(text, re); });
  };
  auto paras = paper.paragraphs();
  if (any(patterns.no_placebo, paper.title)) return {Verdict::no, std::nullopt};
  for (const auto* p : paras) {
    if (any(patterns.no_placebo, p->text)) return {Verdict::no, std::nullopt};
  }
  for (const auto* p : paras) {
    for (const auto& s : p->sentences) {
      if (any(patterns.placebo, s)) return {Verdict::yes, s};
    }
  }
  return {Verdict::no, std::nullopt};
}

}  // namespace decomp::recipes
