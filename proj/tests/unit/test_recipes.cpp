#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <set>

#include "decomp/errors.hpp"
#include "decomp/recipes.hpp"

using namespace decomp;
using namespace decomp::recipes;
using corpus::Verdict;
using lm::CompletionRequest;
using lm::CompletionResponse;

namespace {

Paper make_paper(std::vector<std::string> texts, std::string title = "A trial") {
  Value doc = {{"paper_id", "p"}, {"title", title}};
  Value paras = Value::array();
  for (auto& t : texts) paras.push_back(t);
  doc["sections"] = Value::array({Value{{"heading", "Body"}, {"paragraphs", paras}}});
  return corpus::paper_from_json(doc);
}

CompletionResponse reply(std::string text) {
  CompletionResponse r;
  r.text = std::move(text);
  return r;
}

CompletionResponse echo(const CompletionRequest& req, double p) {
  CompletionResponse r;
  r.text = *req.echo_suffix;
  r.tokens = lm::whitespace_tokens(r.text);
  r.token_logprobs.assign(r.tokens.size(), std::log(p));
  return r;
}

bool has(std::string_view hay, std::string_view needle) { return hay.find(needle) != std::string_view::npos; }

// Recorder, config and a callback agent wired into one context.
struct Harness {
  trace::Recorder recorder{"test"};
  RunConfig config;
  std::mutex mu;
  std::vector<CompletionRequest> requests;
  lm::CallbackAgent agent;
  std::optional<trace::Scope> root;

  explicit Harness(lm::CallbackAgent::Fn fn, int concurrency = 1)
      : agent([this, fn = std::move(fn)](const CompletionRequest& r) {
          {
            std::lock_guard lock(mu);
            requests.push_back(r);
          }
          return fn(r);
        }) {
    config.concurrency_limit = concurrency;
    root.emplace(&recorder, "root", Value::object(), std::nullopt);
  }

  RunContext ctx() { return RunContext{&agent, &recorder, &config, nullptr, root->id()}; }

  trace::Trace finish() {
    root->finish(nullptr);
    root.reset();
    return recorder.finalize();
  }

  std::size_t count_prompts(std::string_view needle) {
    std::size_t n = 0;
    for (const auto& r : requests) n += has(r.prompt, needle);
    return n;
  }
};

std::vector<std::string> ids_of(const std::vector<RankItem>& items) {
  std::vector<std::string> out;
  for (const auto& i : items) out.push_back(i.id);
  return out;
}

// Answers pairwise comparisons from a preference function over paragraph texts.
lm::CallbackAgent::Fn comparator(std::function<bool(const std::string&, const std::string&)> a_beats_b) {
  return [a_beats_b](const CompletionRequest& r) {
    auto grab = [&](const std::string& label) {
      auto s = r.prompt.find(label);
      auto q1 = r.prompt.find('"', s);
      auto q2 = r.prompt.find('"', q1 + 1);
      return r.prompt.substr(q1 + 1, q2 - q1 - 1);
    };
    auto header = r.prompt.find("Which of paragraphs ");
    std::size_t n1 = 0, n2 = 0;
    std::sscanf(r.prompt.c_str() + header, "Which of paragraphs %zu and %zu", &n1, &n2);
    auto t1 = grab("\nParagraph " + std::to_string(n1) + ": ");
    auto t2 = grab("\nParagraph " + std::to_string(n2) + ": ");
    return reply(" Paragraph " + std::to_string(a_beats_b(t1, t2) ? n1 : n2));
  };
}

}  // namespace

TEST(Config, Validation) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  c.perplexity_threshold = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_THROW(RunConfig::from_json(Value{{"perplexity_threshold", 0.0}}), ValidationError);
  EXPECT_THROW(RunConfig::from_json(Value{{"colour", 1}}), ValidationError);
  auto back = RunConfig::from_json(Value{{"perplexity_threshold", 0.3}, {"top_k", 2}});
  EXPECT_DOUBLE_EQ(back.perplexity_threshold, 0.3);
  EXPECT_EQ(RunConfig::from_json(back.to_json()).to_json(), back.to_json());
}

TEST(SelectTop1, FirstOfTies) {
  auto paper = make_paper({"one", "two", "three"});
  Scorer fixed = [](std::string_view, std::span<const Paragraph* const>) { return std::vector<double>{0.1, 0.9, 0.9}; };
  EXPECT_EQ(select_top1(paper, "q", fixed), "s0.p1");
  EXPECT_EQ(select_top1(make_paper({"only"}), "q"), "s0.p0");
  Scorer wrong = [](std::string_view, std::span<const Paragraph* const>) { return std::vector<double>{1.0}; };
  EXPECT_THROW(select_top1(paper, "q", wrong), ValidationError);
  EXPECT_FALSE(select_top1(Paper{}, "q"));
}

TEST(SelectTop1, LexicalFindsKeywordParagraph) {
  auto paper = make_paper({"Participants were recruited from clinics in three districts.",
                           "The control arm received saline injections as placebo.",
                           "Outcomes were measured at twelve months."});
  EXPECT_EQ(select_top1(paper, "Describe the placebo used in the trial, if any."), "s0.p1");
  auto words = content_words("The placebos were tested");
  EXPECT_EQ(words, (std::vector<std::string>{"placebo", "test"}));
}

TEST(AnswerFromExcerpts, ZeroDemosUsesBaselineTemplate) {
  Harness h([](const CompletionRequest&) { return reply(" Saline injections."); });
  auto paper = make_paper({"First.", "Second."}, "Title X");
  auto a = answer_from_excerpts(h.ctx(), "Q?", paper.title, paper.paragraphs());
  EXPECT_EQ(a.text, "Saline injections.");
  EXPECT_FALSE(a.not_mentioned);
  EXPECT_EQ(a.support, (std::vector<std::string>{"s0.p0", "s0.p1"}));
  ASSERT_EQ(h.requests.size(), 1u);
  auto want = prompts::PromptLibrary::builtin().get("baseline_qa").render(
      {{"question", "Q?"}, {"title", "Title X"}, {"paragraph", "First.\n\nSecond."}});
  EXPECT_EQ(h.requests[0].prompt, want.text);
  auto t = h.finish();
  auto calls = trace::query_calls(t, "answer");
  ASSERT_EQ(calls.size(), 1u);
  ASSERT_TRUE(calls[0].prompt_template);
  EXPECT_EQ(calls[0].prompt_template->render(), want.text);
  EXPECT_EQ(a.raw_calls, std::vector<std::string>{calls[0].call_id});
}

TEST(AnswerFromExcerpts, DemonstrationsPrecedeTarget) {
  Harness h([](const CompletionRequest&) { return reply(" ans"); });
  auto paper = make_paper({"Target paragraph."});
  std::vector<Demonstration> demos{{corpus::Task::qasper, "d1", "Demo question one?", {"Demo excerpt one."}, "Answer one"},
                                   {corpus::Task::qasper, "d2", "Demo question two?", {"Demo excerpt two."}, "Answer two"}};
  answer_from_excerpts(h.ctx(), "Target question?", paper.title, paper.paragraphs(), demos);
  const auto& p = h.requests.at(0).prompt;
  const auto d1 = p.find("Demo question one?");
  const auto d2 = p.find("Demo question two?");
  const auto target = p.find("Target question?");
  ASSERT_NE(d1, std::string::npos);
  ASSERT_NE(d2, std::string::npos);
  ASSERT_NE(target, std::string::npos);
  EXPECT_LT(d1, d2);
  EXPECT_LT(d2, target);
  EXPECT_TRUE(has(p, "Answer: Answer one"));
  EXPECT_TRUE(p.ends_with("Answer:"));
}

TEST(AnswerFromExcerpts, CanonicalSentenceIsNotMentioned) {
  Harness h([](const CompletionRequest&) { return reply(" The answer to the question is not mentioned in the excerpt."); });
  auto paper = make_paper({"x"});
  auto a = answer_from_excerpts(h.ctx(), "q", "t", paper.paragraphs());
  EXPECT_TRUE(a.not_mentioned);
  EXPECT_EQ(a.text, lm::kNotMentioned);
  EXPECT_TRUE(is_not_mentioned("  the ANSWER to the question is not mentioned"));
  EXPECT_FALSE(is_not_mentioned("Saline"));
}

TEST(AnswerFromExcerpts, EmptySelectionSkipsModel) {
  Harness h([](const CompletionRequest&) -> CompletionResponse { throw std::logic_error("unexpected call"); });
  auto a = answer_from_excerpts(h.ctx(), "q", "t", {});
  EXPECT_TRUE(a.not_mentioned);
  EXPECT_TRUE(h.requests.empty());
}

TEST(AnswerFromExcerpts, OverBudgetDropsLowestRanked) {
  Harness h([](const CompletionRequest&) { return reply(" ok"); });
  std::string words;
  for (int i = 0; i < 300; ++i) words += "word ";
  auto paper = make_paper({"alpha " + words, "beta " + words, "gamma " + words});
  h.config.context_tokens = 1100;
  h.config.completion_tokens = 100;
  auto a = answer_from_excerpts(h.ctx(), "q", "t", paper.paragraphs(), {}, {"s0.p2", "s0.p0", "s0.p1"});
  EXPECT_EQ(a.support, (std::vector<std::string>{"s0.p0", "s0.p2"}));
  EXPECT_LE(lm::estimate_tokens(h.requests[0].prompt) + 100, 1100u);
  auto t = h.finish();
  EXPECT_EQ(*trace::query_calls(t, "answer_from_excerpts")[0].custom_value("dropped_excerpts"), 1);
}

TEST(PerplexitySelect, ThresholdInDocumentOrder) {
  auto paper = make_paper({"para one", "para two", "para three"});
  std::map<std::string, double> scores{{"para one", 0.9}, {"para two", 0.05}, {"para three", 0.4}};
  Harness h([&](const CompletionRequest& r) {
    for (auto& [k, v] : scores) {
      if (has(r.prompt, "Paper excerpt: " + k + "\n")) return echo(r, v);
    }
    return echo(r, 1.0);
  }, 4);
  h.config.perplexity_threshold = 0.5;
  EXPECT_EQ(perplexity_select(h.ctx(), paper, "q"), (std::vector<std::string>{"s0.p1", "s0.p2"}));
  h.config.perplexity_threshold = 0.04;
  EXPECT_TRUE(perplexity_select(h.ctx(), paper, "q").empty());

  scores = {{"para one", 0.05}, {"para two", 0.4}, {"para three", 0.9}};
  h.config.perplexity_threshold = 0.5;
  EXPECT_EQ(perplexity_select(h.ctx(), paper, "q"), (std::vector<std::string>{"s0.p0", "s0.p1"}));

  auto t = h.finish();
  auto calls = trace::query_calls(t, "score_not_mentioned", std::string("score"));
  ASSERT_EQ(calls.size(), 9u);
  EXPECT_NEAR(calls[0].custom_value("score")->get<double>(), 0.05, 1e-12);
  for (const auto& c : calls) {
    EXPECT_TRUE(c.custom_value("para_id"));
    ASSERT_TRUE(c.prompt_template);
  }
}

TEST(PerplexitySelect, MonotoneInThreshold) {
  std::vector<ScoredParagraph> s;
  for (int i = 0; i < 40; ++i) s.push_back({"p" + std::to_string(i), std::fmod(i * 0.137, 1.0)});
  std::vector<std::string> prev;
  for (int k = 1; k < 20; ++k) {
    auto cur = select_below(s, k * 0.05);
    for (const auto& id : prev) EXPECT_NE(std::find(cur.begin(), cur.end(), id), cur.end());
    prev = cur;
  }
}

TEST(Prune, ParsesSubset) {
  auto paper = make_paper({"a", "b", "c"});
  std::vector<std::string> sel{"s0.p0", "s0.p1", "s0.p2"};
  Harness h1([](const CompletionRequest&) { return reply(" 3, 1"); });
  EXPECT_EQ(prune(h1.ctx(), paper, "q", sel), (std::vector<std::string>{"s0.p0", "s0.p2"}));
  EXPECT_TRUE(has(h1.requests[0].prompt, "Paragraph 1: a\n\nParagraph 2: b\n\nParagraph 3: c"));
  Harness h2([](const CompletionRequest&) { return reply(" 1, 2, 3"); });
  EXPECT_EQ(prune(h2.ctx(), paper, "q", sel), sel);
}

TEST(Prune, GarbageFailsOpen) {
  auto paper = make_paper({"a", "b", "c"});
  std::vector<std::string> sel{"s0.p0", "s0.p2"};
  for (const char* out : {" none of them", " 1, 7"}) {
    Harness h([&](const CompletionRequest&) { return reply(out); });
    EXPECT_EQ(prune(h.ctx(), paper, "q", sel), sel);
    auto t = h.finish();
    auto calls = trace::query_calls(t, "prune");
    ASSERT_EQ(calls.size(), 1u);
    EXPECT_EQ(*calls[0].custom_value("prune_fallback"), true);
  }
}

TEST(PairwiseRank, SingleItem) {
  Harness h([](const CompletionRequest&) -> CompletionResponse { throw std::logic_error("no compare expected"); });
  auto items = rank_items(make_paper({"only"}));
  EXPECT_EQ(ids_of(pairwise_rank(h.ctx(), items, "q", 1)), std::vector<std::string>{"s0.p0"});
  EXPECT_THROW(pairwise_rank(h.ctx(), items, "q", 0), UsageError);
}

TEST(PairwiseRank, TotalOrderTopTwo) {
  std::map<std::string, int> strength{{"v1", 3}, {"v2", 5}, {"v3", 1}, {"v4", 4}, {"v5", 2}};
  Harness h(comparator([&](const std::string& a, const std::string& b) { return strength[a] > strength[b]; }));
  auto items = rank_items(make_paper({"v1", "v2", "v3", "v4", "v5"}));
  auto top = pairwise_rank(h.ctx(), items, "q", 2);
  EXPECT_EQ(ids_of(top), (std::vector<std::string>{"s0.p1", "s0.p3"}));
  EXPECT_EQ(top[0].number, 2u);
  EXPECT_LE(h.requests.size(), 2u * 4u);
  auto all = pairwise_rank(h.ctx(), items, "q", 10);
  EXPECT_EQ(ids_of(all), (std::vector<std::string>{"s0.p1", "s0.p3", "s0.p0", "s0.p4", "s0.p2"}));
}

TEST(PairwiseRank, NontransitiveCycle) {
  // A beats B, B beats C, C beats A.
  std::set<std::pair<std::string, std::string>> wins{{"A", "B"}, {"B", "C"}, {"C", "A"}};
  Harness h(comparator([&](const std::string& a, const std::string& b) { return wins.contains({a, b}); }));
  auto items = rank_items(make_paper({"A", "B", "C"}));
  EXPECT_EQ(ids_of(pairwise_rank(h.ctx(), items, "q", 1)), std::vector<std::string>{"s0.p2"});
  EXPECT_EQ(h.requests.size(), 2u);
  auto t = h.finish();
  EXPECT_EQ(trace::query_calls(t, "compare_paragraphs").size(), 2u);
  EXPECT_EQ(trace::query_calls(t, "compare").size(), 2u);
}

TEST(PairwiseRank, UnparseableKeepsIncumbentAndMemoizes) {
  Harness h([](const CompletionRequest&) { return reply(" I cannot tell."); });
  auto items = rank_items(make_paper({"a", "b", "c"}));
  auto top = pairwise_rank(h.ctx(), items, "q", 3);
  EXPECT_EQ(ids_of(top), (std::vector<std::string>{"s0.p0", "s0.p1", "s0.p2"}));
  EXPECT_EQ(h.requests.size(), 3u);
  auto t = h.finish();
  for (const auto& c : trace::query_calls(t, "compare_paragraphs")) EXPECT_EQ(*c.custom_value("unparseable"), true);
}

TEST(PairwiseRank, LowerNumberShownFirst) {
  Harness h(comparator([](const std::string& a, const std::string&) { return a == "late"; }));
  auto items = rank_items(make_paper({"early", "late"}));
  pairwise_rank(h.ctx(), items, "q", 1);
  EXPECT_TRUE(has(h.requests[0].prompt, "Which of paragraphs 1 and 2"));
}

TEST(Verdicts, FinalLineParsing) {
  EXPECT_EQ(parse_final_verdict("The control got saline.\nA: Yes"), Verdict::yes);
  EXPECT_EQ(parse_final_verdict("Reasoning...\nA: Unclear\n\n"), Verdict::unclear);
  EXPECT_EQ(parse_final_verdict("Yes it did.\nSo the paper is fine"), Verdict::unclear);
  EXPECT_EQ(parse_final_verdict(" no."), Verdict::no);
  EXPECT_EQ(parse_final_verdict(""), Verdict::unclear);
}

TEST(Verdicts, ClassifyParagraph) {
  auto paper = make_paper({"P1", "P2", "P3"});
  Harness h([](const CompletionRequest& r) {
    if (has(r.prompt, "P1")) return reply(" They got a sugar pill.\nA: Yes");
    if (has(r.prompt, "P2")) return reply(" Hard to say.\nA: Unclear");
    return reply(" Nothing here about it.");
  });
  auto paras = paper.paragraphs();
  EXPECT_EQ(classify_paragraph_placebo(h.ctx(), *paras[0]), Verdict::yes);
  EXPECT_EQ(classify_paragraph_placebo(h.ctx(), *paras[1]), Verdict::unclear);
  EXPECT_EQ(classify_paragraph_placebo(h.ctx(), *paras[2]), Verdict::unclear);
  auto t = h.finish();
  auto yes = trace::query_calls(t, "classify_paragraph_placebo", std::nullopt, trace::CallFilter{"classification", "Yes"});
  EXPECT_EQ(yes.size(), 1u);
}

TEST(Rules, AggregateExamples) {
  using V = Verdict;
  std::vector<V> a{V::yes, V::unclear};
  std::vector<V> b{V::unclear, V::no, V::yes};
  std::vector<V> none;
  EXPECT_EQ(aggregate_paragraph_votes(a), V::yes);
  EXPECT_EQ(aggregate_paragraph_votes(b), V::no);
  EXPECT_EQ(aggregate_paragraph_votes(none), V::no);
}

TEST(Rules, ArmsAndEnsemble) {
  using V = Verdict;
  EXPECT_EQ(arms_rule(V::yes, V::yes), V::unclear);
  EXPECT_EQ(arms_rule(V::yes, V::no), V::yes);
  EXPECT_EQ(arms_rule(V::no, V::yes), V::no);
  EXPECT_EQ(arms_rule(V::no, std::nullopt), V::no);
  EXPECT_EQ(ensemble_placebo(V::unclear, V::yes), V::yes);
  EXPECT_EQ(ensemble_placebo(V::yes, V::no), V::no);
  EXPECT_EQ(ensemble_placebo(V::unclear, V::unclear), V::no);
  EXPECT_EQ(ensemble_placebo(V::yes, V::unclear), V::yes);
}

namespace {

// Arms corpus: two arms, a judgment and an unblinding answer chosen by the test.
lm::CallbackAgent::Fn arms_agent(std::string judgment, std::string unblinding) {
  return [judgment, unblinding](const CompletionRequest& r) {
    if (has(r.prompt, "Which of paragraphs")) return reply(" Paragraph 1");
    if (has(r.prompt, "Followup-question")) return reply(unblinding);
    if (has(r.prompt, "Does the paper use a placebo?")) return reply(judgment);
    if (has(r.prompt, "What were the trial arms")) return reply(" Azithromycin, Placebo");
    if (has(r.prompt, "Describe the trial arm \"Placebo\"")) return reply(" Identical vehicle without drug");
    if (has(r.prompt, "Describe the trial arm")) return reply(" Oral azithromycin");
    if (has(r.prompt, "did the paper use a placebo?")) return reply(" It mentions a placebo.\nA: Yes");
    if (has(r.prompt, "Describe the placebo used")) return reply(" The vehicle of the oral azithromycin suspension");
    return reply(" ?");
  };
}

}  // namespace

TEST(ArmsPipeline, UnblindedIsUnclear) {
  auto paper = make_paper({"Communities got azithromycin or placebo.", "Outcomes were deaths."});
  Harness h(arms_agent(" Arm 2 is a placebo.\nA: Yes", " Participants could tell.\nA: Yes"));
  auto out = arms_pipeline(h.ctx(), paper);
  ASSERT_EQ(out.arms.size(), 2u);
  EXPECT_EQ(out.arms[1].name, "Placebo");
  EXPECT_EQ(out.arms[1].description, "Identical vehicle without drug");
  EXPECT_EQ(out.looks_like_placebo, Verdict::yes);
  EXPECT_EQ(out.can_tell, Verdict::yes);
  EXPECT_EQ(out.verdict, Verdict::unclear);
  EXPECT_EQ(h.count_prompts("Followup-question"), 1u);
  EXPECT_TRUE(has(h.requests.back().prompt, "Arm 2: Placebo\nDescription of arm 2: Identical vehicle without drug"));
}

TEST(ArmsPipeline, NoPlaceboSkipsUnblinding) {
  auto paper = make_paper({"Communities got azithromycin or nothing."});
  Harness h(arms_agent(" No placebo.\nA: No", " A: Yes"));
  auto out = arms_pipeline(h.ctx(), paper);
  EXPECT_EQ(out.verdict, Verdict::no);
  EXPECT_FALSE(out.can_tell);
  EXPECT_EQ(h.count_prompts("Followup-question"), 0u);
}

TEST(DescribePlacebo, OnlyForYes) {
  auto paper = make_paper({"The placebo contained the vehicle of the oral azithromycin suspension."});
  Harness h(arms_agent(" A: Yes", " A: No"));
  EXPECT_FALSE(describe_placebo(h.ctx(), paper, Verdict::no));
  EXPECT_FALSE(describe_placebo(h.ctx(), paper, Verdict::unclear));
  EXPECT_TRUE(h.requests.empty());
  auto d = describe_placebo(h.ctx(), paper, Verdict::yes);
  ASSERT_TRUE(d);
  EXPECT_EQ(d->text, "The vehicle of the oral azithromycin suspension");
  auto empty = describe_placebo(h.ctx(), Paper{}, Verdict::yes);
  ASSERT_TRUE(empty);
  EXPECT_TRUE(empty->not_mentioned);
}

TEST(PlaceboDecomposition, EnsemblesBranches) {
  auto paper = make_paper({"Communities got azithromycin or placebo.", "Mortality fell."});
  Harness h(arms_agent(" A: Yes", " A: Yes"), 4);
  auto r = placebo_decomposition(h.ctx(), paper);
  EXPECT_EQ(r.arms.verdict, Verdict::unclear);
  EXPECT_EQ(r.paragraph_votes, (std::vector<Verdict>{Verdict::yes, Verdict::yes}));
  EXPECT_EQ(r.verdict, Verdict::yes);
  ASSERT_TRUE(r.description);
  EXPECT_FALSE(r.description->not_mentioned);
  auto t = h.finish();
  EXPECT_EQ(trace::query_calls(t, "placebo_decomposition").size(), 1u);
}

TEST(KeywordTree, QuotedTrialSentences) {
  auto open = make_paper({"The study was an open randomized controlled clinical trial."});
  EXPECT_EQ(keyword_decision_tree(open).verdict, Verdict::no);
  auto tdf = make_paper({"Participants were randomized to daily TDF or daily placebo beginning at enrollment. "
                         "Follow-up lasted a year."});
  auto d = keyword_decision_tree(tdf);
  EXPECT_EQ(d.verdict, Verdict::yes);
  EXPECT_EQ(d.description, "Participants were randomized to daily TDF or daily placebo beginning at enrollment.");
  auto neither = make_paper({"Both groups received a survey."});
  d = keyword_decision_tree(neither);
  EXPECT_EQ(d.verdict, Verdict::no);
  EXPECT_FALSE(d.description);
}

TEST(KeywordTree, NoDescriptionOnNoAndCustomPatterns) {
  auto mixed = make_paper({"A placebo was planned.", "In the end the trial was open-label."});
  auto d = keyword_decision_tree(mixed);
  EXPECT_EQ(d.verdict, Verdict::no);
  EXPECT_FALSE(d.description);
  auto custom = KeywordPatterns::from_json(Value{{"no_placebo", Value::array()}, {"placebo", {"dummy pill"}}});
  d = keyword_decision_tree(make_paper({"Controls took a Dummy Pill daily."}), custom);
  EXPECT_EQ(d.verdict, Verdict::yes);
  EXPECT_THROW(KeywordPatterns::from_json(Value{{"placebo", {"("}}, {"no_placebo", Value::array()}}), ValidationError);
  EXPECT_THROW(KeywordPatterns::from_json(Value::object()), ValidationError);
}

TEST(StuffPaper, YesChainAndBudget) {
  std::string words;
  for (int i = 0; i < 5000; ++i) words += "filler ";
  auto paper = make_paper({"Controls took placebo.", words});
  Harness h([](const CompletionRequest& r) {
    if (has(r.prompt, "Please describe the placebo")) return reply(" Matching sugar pills.");
    if (has(r.prompt, "So, to sum up")) return reply(" Yes");
    return reply(" The controls took placebo.");
  });
  auto d = stuff_paper_baseline(h.ctx(), paper);
  EXPECT_EQ(d.verdict, Verdict::yes);
  EXPECT_EQ(d.description, "Matching sugar pills.");
  ASSERT_EQ(h.requests.size(), 3u);
  for (const auto& r : h.requests) {
    EXPECT_LE(lm::estimate_tokens(r.prompt) + static_cast<std::size_t>(h.config.completion_tokens),
              h.config.context_tokens);
  }
  EXPECT_TRUE(h.requests[0].prompt.starts_with("A trial\n\nControls took placebo."));
  EXPECT_TRUE(has(h.requests[1].prompt, h.requests[0].prompt + " The controls took placebo."));
}

TEST(StuffPaper, NoStopsAfterTwoTurns) {
  auto paper = make_paper({"Controls got nothing."});
  Harness h([](const CompletionRequest& r) {
    if (has(r.prompt, "So, to sum up")) return reply(" No");
    return reply(" No placebo.");
  });
  auto d = stuff_paper_baseline(h.ctx(), paper);
  EXPECT_EQ(d.verdict, Verdict::no);
  EXPECT_FALSE(d.description);
  EXPECT_EQ(h.requests.size(), 2u);
  auto t = h.finish();
  EXPECT_TRUE(trace::query_calls(t, "stuff_turn_describe").empty());
}

TEST(Decontext, StripBrackets) {
  EXPECT_EQ(strip_bracketed("It [The Super Bowl XLI halftime show] was headlined by Prince."),
            "It was headlined by Prince.");
  EXPECT_EQ(strip_bracketed("a [b [c] d] e"), "a e");
  EXPECT_EQ(strip_bracketed("unclosed [x"), "unclosed [x");
}

TEST(Decontext, RewritesAfterFirstParagraph) {
  auto paper = make_paper({"The Super Bowl XLI halftime show took place on February 4, 2007.",
                           "It was headlined by Prince.", "He played guitar.", "It rained."});
  Harness h([](const CompletionRequest& r) {
    if (r.prompt.ends_with("Passage: It was headlined by Prince.\n\nRewrite:")) {
      return reply(" It [The Super Bowl XLI halftime show] was headlined by Prince.");
    }
    if (has(r.prompt, "Passage: He played guitar.")) return reply(" He [Prince] played a guitar.");
    throw lm::TransportError("down", 503);
  }, 3);
  auto out = decontextualize(h.ctx(), paper);
  auto paras = out.paragraphs();
  EXPECT_EQ(paras[0]->text, paper.paragraphs()[0]->text);
  EXPECT_EQ(paras[1]->text, "It [The Super Bowl XLI halftime show] was headlined by Prince.");
  EXPECT_EQ(paras[2]->text, "He played guitar.");
  EXPECT_EQ(paras[3]->text, "It rained.");
  EXPECT_EQ(h.requests.size(), 3u);
  for (std::size_t i = 0; i < paras.size(); ++i) {
    EXPECT_EQ(paras[i]->para_id, paper.paragraphs()[i]->para_id);
    EXPECT_EQ(strip_bracketed(paras[i]->text), paper.paragraphs()[i]->text);
  }
  auto t = h.finish();
  auto mismatch = trace::query_calls(t, "decontextualize_paragraph", std::nullopt,
                                     trace::CallFilter{"decontext_fallback", "mismatch"});
  auto failed = trace::query_calls(t, "decontextualize_paragraph", std::nullopt,
                                   trace::CallFilter{"decontext_fallback", "transport"});
  EXPECT_EQ(mismatch.size(), 1u);
  EXPECT_EQ(failed.size(), 1u);
}

TEST(Lists, ParseList) {
  EXPECT_EQ(parse_list(" Azithromycin, Placebo"), (std::vector<std::string>{"Azithromycin", "Placebo"}));
  EXPECT_EQ(parse_list("1. Drug (20 mg, daily)\n2) Placebo.\n- placebo"),
            (std::vector<std::string>{"Drug (20 mg, daily)", "Placebo"}));
  EXPECT_TRUE(parse_list("  ").empty());
}

namespace {

// Flow corpus: one experiment with two arms, adherence stated for one arm only.
struct FlowScript {
  std::map<std::string, double> relevant;  // paragraph -> score for every question

  lm::CallbackAgent::Fn fn() {
    return [this](const CompletionRequest& r) {
      if (r.echo()) {
        for (auto& [k, v] : relevant) {
          if (has(r.prompt, "Paper excerpt: " + k)) return echo(r, v);
        }
        return echo(r, 0.95);
      }
      if (has(r.prompt, "Question: What were the experiments")) return reply(" Main trial");
      if (has(r.prompt, "Question: What were the trial arms")) return reply(" Iron, Control");
      if (has(r.prompt, "Question: How many participants in the \"Iron\"")) return reply(" 92% took all doses");
      return reply(" The answer to the question is not mentioned in the excerpt");
    };
  }
};

}  // namespace

TEST(ParticipantFlow, ScriptedTriple) {
  auto paper = make_paper({"We ran one randomized trial with iron and control arms.", "92% of the iron arm adhered.",
                           "Weather was mild."});
  FlowScript script{{{"We ran one", 0.1}, {"92% of", 0.2}}};
  Harness h(script.fn(), 2);
  auto units = participant_flow_pipeline(h.ctx(), paper, std::nullopt, {}, QaStrategy::perplexity_fewshot);
  ASSERT_EQ(units.size(), 4u);
  EXPECT_EQ(units[0].prediction, Value::array({"Main trial"}));
  EXPECT_EQ(units[1].unit_id, "Main trial");
  EXPECT_EQ(units[1].prediction, Value::array({"Iron", "Control"}));
  EXPECT_EQ(units[2].unit_id, flow_unit_id("Main trial", "Iron"));
  EXPECT_EQ(units[2].prediction, "92% took all doses");
  EXPECT_TRUE(units[3].prediction.is_null());
  auto t = h.finish();
  // One score per paragraph per question: 4 questions x 3 paragraphs.
  EXPECT_EQ(trace::query_calls(t, "score_not_mentioned").size(), 12u);
}

TEST(ParticipantFlow, NothingBelowThresholdIsNotMentioned) {
  auto paper = make_paper({"Unrelated text.", "More unrelated text."});
  FlowScript script;
  Harness h(script.fn());
  FlowEnumeration e{{"Trial A"}, {{"Arm 1", "Arm 2"}}};
  auto units = participant_flow_pipeline(h.ctx(), paper, e, {}, QaStrategy::perplexity);
  ASSERT_EQ(units.size(), 4u);
  EXPECT_EQ(units[2].task, corpus::Task::adherence);
  EXPECT_TRUE(units[2].prediction.is_null());
  EXPECT_TRUE(units[3].prediction.is_null());
  for (const auto& r : h.requests) EXPECT_TRUE(r.echo());
}

TEST(ParticipantFlow, UnitFailuresAreRecorded) {
  auto paper = make_paper({"Text."});
  Harness h([](const CompletionRequest& r) -> CompletionResponse {
    if (r.echo()) return echo(r, 0.1);
    if (has(r.prompt, "Arm 1")) throw lm::FixtureMissing("abc");
    return reply(" fine");
  });
  FlowEnumeration e{{"T"}, {{"Arm 1", "Arm 2"}}};
  auto units = participant_flow_pipeline(h.ctx(), paper, e, {}, QaStrategy::elicit);
  ASSERT_EQ(units.size(), 4u);
  ASSERT_TRUE(units[2].failure);
  EXPECT_TRUE(units[2].failure->starts_with("fixture_missing"));
  EXPECT_FALSE(units[3].failure);
}

TEST(Qasper, PipelineUsesDemosAndSelection) {
  auto paper = make_paper({"We fine-tune BERT on the corpus.", "Related work is broad."});
  Harness h([](const CompletionRequest& r) {
    if (r.echo()) return echo(r, has(r.prompt, "BERT") ? 0.02 : 0.9);
    return reply(" BERT");
  });
  std::vector<Demonstration> demos{{corpus::Task::qasper, "other", "Which dataset?", {"We use SQuAD."}, "SQuAD"}};
  auto a = qasper_pipeline(h.ctx(), paper, "Which model is used?", demos);
  EXPECT_EQ(a.text, "BERT");
  EXPECT_EQ(a.support, std::vector<std::string>{"s0.p0"});
  EXPECT_TRUE(has(h.requests.back().prompt, "Answer: SQuAD"));
}

TEST(Demonstrations, FromGoldAndSampling) {
  auto paper = make_paper({"Evidence one.", "Evidence two."});
  std::vector<corpus::GoldRecord> gold;
  auto add = [&](corpus::Task t, std::string unit, Value label, std::vector<std::string> ev, std::string q = {}) {
    corpus::GoldRecord g;
    g.task = t;
    g.paper_id = "p";
    g.unit_id = std::move(unit);
    g.label = std::move(label);
    g.evidence = std::move(ev);
    if (!q.empty()) g.question = q;
    gold.push_back(std::move(g));
  };
  add(corpus::Task::placebo_class, "t", "Yes", {"s0.p0"});
  add(corpus::Task::placebo_desc, "t", "saline", {"s0.p0"});
  add(corpus::Task::qasper, "q1", Value::array({"Unanswerable"}), {"s0.p1"}, "Q1?");
  add(corpus::Task::qasper, "q2", Value::array({"BERT", "bert"}), {"s0.p1"}, "Q2?");
  add(corpus::Task::qasper, "q3", Value::array({"x"}), {}, "Q3?");
  add(corpus::Task::arms, "e", Value::array({"A", "B"}), {"s0.p0", "s0.p1"});
  auto pool = demonstrations_from_gold(gold, {paper});
  ASSERT_EQ(pool.size(), 3u);
  EXPECT_EQ(pool[0].question, kPlaceboQuestion);
  EXPECT_EQ(pool[1].answer, "BERT");
  EXPECT_EQ(pool[2].answer, "A, B");
  EXPECT_EQ(pool[2].excerpts.size(), 2u);

  std::vector<Demonstration> big;
  for (int i = 0; i < 30; ++i) {
    big.push_back({corpus::Task::qasper, "paper" + std::to_string(i % 5), "Q" + std::to_string(i), {"e"}, "a"});
  }
  auto s1 = sample_demonstrations(big, corpus::Task::qasper, 4, "", "Q3", 7);
  auto s2 = sample_demonstrations(big, corpus::Task::qasper, 4, "", "Q3", 7);
  ASSERT_EQ(s1.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(s1[i].question, s2[i].question);
    EXPECT_NE(s1[i].question, "Q3");
  }
  for (const auto& d : sample_demonstrations(big, corpus::Task::qasper, 30, "paper1", "", 1)) {
    EXPECT_NE(d.paper_id, "paper1");
  }
  EXPECT_EQ(sample_demonstrations(big, corpus::Task::qasper, 30, "paper1", "", 1).size(), 24u);
  EXPECT_TRUE(sample_demonstrations(big, corpus::Task::arms, 3, "", "", 1).empty());
}

TEST(Errors, Kinds) {
  EXPECT_EQ(error_kind(lm::FixtureMissing("x")), "fixture_missing");
  EXPECT_EQ(error_kind(lm::AuthError("x", 401)), "auth");
  EXPECT_EQ(error_kind(lm::QuotaError("x", 429)), "quota");
  EXPECT_EQ(error_kind(lm::TransportError("x", 0)), "transport");
  EXPECT_EQ(error_kind(ValidationError("x")), "validation");
  EXPECT_EQ(error_kind(std::runtime_error("x")), "error");
}
