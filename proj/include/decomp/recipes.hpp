#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "decomp/corpus.hpp"
#include "decomp/lm.hpp"
#include "decomp/prompts.hpp"
#include "decomp/trace.hpp"

namespace decomp::recipes {

using corpus::Paper;
using corpus::Paragraph;
using corpus::Verdict;
using trace::Value;

struct RunConfig {
  double perplexity_threshold = 0.5;
  int concurrency_limit = 4;
  int top_k = 4;
  int demos_per_prompt = 2;
  std::uint64_t seed = 0;
  std::size_t context_tokens = 4096;
  int completion_tokens = 256;

  // Throws ValidationError on out-of-range values.
  void validate() const;
  Value to_json() const;
  static RunConfig from_json(const Value& j);
};

// Everything a recipe operation needs. `parent` is the traced call that new
// calls nest under.
struct RunContext {
  lm::Agent* agent = nullptr;
  trace::Recorder* recorder = nullptr;
  const RunConfig* config = nullptr;
  const prompts::PromptLibrary* prompts = nullptr;
  std::optional<trace::CallId> parent;

  RunContext under(const trace::Scope& scope) const;
  const RunConfig& cfg() const;
  const prompts::Template& prompt(std::string_view name) const;
  lm::Agent& lm() const;
};

// Questions asked by the built-in pipelines.
inline constexpr std::string_view kPlaceboQuestion = "Describe the placebo used in the trial, if any.";
inline constexpr std::string_view kArmsQuestion = "What were the trial arms (subgroups of participants) of the study?";
inline constexpr std::string_view kExperimentsQuestion =
    "What were the experiments (separately randomized trials) reported in the paper?";
std::string describe_arm_question(std::string_view arm);
std::string flow_arms_question(std::string_view experiment);
std::string adherence_question(std::string_view experiment, std::string_view arm);

struct Answer {
  std::string text;
  bool not_mentioned = false;
  std::vector<std::string> support;  // para_ids the answer was based on
  std::vector<trace::CallId> raw_calls;

  Value to_json() const;
};

Answer not_mentioned_answer();
// True when the completion opens with the canonical not-mentioned sentence.
bool is_not_mentioned(std::string_view completion);

struct Demonstration {
  corpus::Task task = corpus::Task::qasper;
  std::string paper_id;
  std::string question;
  std::vector<std::string> excerpts;
  std::string answer;
};

// Question text asked for a gold unit.
std::string question_for(const corpus::GoldRecord& g);
// Positive examples with evidence, resolved against `papers`.
std::vector<Demonstration> demonstrations_from_gold(const std::vector<corpus::GoldRecord>& gold,
                                                   const std::vector<Paper>& papers);
// Deterministic sample of `n` pool entries of the same task, skipping entries
// from `exclude_paper` and entries asking `exclude_question`.
std::vector<Demonstration> sample_demonstrations(const std::vector<Demonstration>& pool, corpus::Task task,
                                                 std::size_t n, std::string_view exclude_paper,
                                                 std::string_view exclude_question, std::uint64_t seed);

// Lexical relevance: IDF-weighted overlap of stemmed content words, with IDF
// computed over the candidate paragraphs.
std::vector<double> lexical_scores(std::string_view question, std::span<const Paragraph* const> paragraphs);
std::vector<std::string> content_words(std::string_view text);

// Maps (question, paragraphs) to one relevance score per paragraph, higher
// meaning more relevant.
using Scorer = std::function<std::vector<double>(std::string_view, std::span<const Paragraph* const>)>;

// Highest-scoring paragraph; ties go to the earliest. Empty paper gives nullopt.
std::optional<std::string> select_top1(const Paper& paper, std::string_view question,
                                       const Scorer& scorer = lexical_scores);

// Answers from `excerpts` (document order). Excerpts are dropped, lowest
// ranked first, until the prompt fits the context budget; `ranking` lists
// para_ids most relevant first and defaults to document order. No excerpts
// gives a not-mentioned answer without calling the model.
Answer answer_from_excerpts(const RunContext& ctx, std::string_view question, std::string_view title,
                            std::vector<const Paragraph*> excerpts, const std::vector<Demonstration>& demos = {},
                            const std::vector<std::string>& ranking = {});

struct ScoredParagraph {
  std::string para_id;
  double score = 0.0;
};

// Not-mentioned score of every paragraph, in document order.
std::vector<ScoredParagraph> perplexity_scores(const RunContext& ctx, const Paper& paper, std::string_view question);
// para_ids with score < threshold, in document order.
std::vector<std::string> select_below(std::span<const ScoredParagraph> scores, double threshold);
std::vector<std::string> perplexity_select(const RunContext& ctx, const Paper& paper, std::string_view question);

// Asks the model which of `selected` are needed. Unusable answers return the
// input unchanged and record `prune_fallback`.
std::vector<std::string> prune(const RunContext& ctx, const Paper& paper, std::string_view question,
                               const std::vector<std::string>& selected);

struct RankItem {
  std::string id;
  std::string text;
  std::size_t number = 0;  // label shown to the model
};

// Items for every paragraph, numbered by 1-based document position.
std::vector<RankItem> rank_items(const Paper& paper);

// Top-k by repeated champion scans over pairwise comparisons. The first pass
// keeps the earliest item on ties and unparseable answers. Comparisons are
// memoized within one call. Result is best first.
std::vector<RankItem> pairwise_rank(const RunContext& ctx, const std::vector<RankItem>& items,
                                    std::string_view question, int k);

// Answers `question` from ranked items shown in document order.
std::string rank_answer(const RunContext& ctx, std::string_view question, std::vector<RankItem> items);

// First yes/no/unclear word on the last nonempty line, else Unclear.
Verdict parse_final_verdict(std::string_view completion);
// Splits a model-written list into clean item names.
std::vector<std::string> parse_list(std::string_view text);

Verdict classify_paragraph_placebo(const RunContext& ctx, const Paragraph& paragraph);
// Any No -> No; else any Yes -> Yes; else No.
Verdict aggregate_paragraph_votes(std::span<const Verdict> votes);
// The placebo judgment, downgraded to Unclear when participants could tell
// their arm.
Verdict arms_rule(Verdict looks_like_placebo, std::optional<Verdict> can_tell);
// Yes with Yes or Unclear -> Yes; everything else -> No.
Verdict ensemble_placebo(Verdict arms, Verdict paragraphs);

struct Arm {
  std::string name;
  std::string description;
};

struct ArmsOutcome {
  std::vector<Arm> arms;
  Verdict looks_like_placebo = Verdict::unclear;
  std::optional<Verdict> can_tell;
  Verdict verdict = Verdict::unclear;
};

ArmsOutcome arms_pipeline(const RunContext& ctx, const Paper& paper);

// Placebo description for a Yes classification, else nullopt.
std::optional<Answer> describe_placebo(const RunContext& ctx, const Paper& paper, Verdict classification);

struct PlaceboResult {
  ArmsOutcome arms;
  std::vector<Verdict> paragraph_votes;
  Verdict paragraph_verdict = Verdict::unclear;
  Verdict verdict = Verdict::unclear;
  std::optional<Answer> description;
};

PlaceboResult placebo_decomposition(const RunContext& ctx, const Paper& paper);

struct KeywordPatterns {
  std::vector<std::regex> no_placebo;
  std::vector<std::regex> placebo;

  static const KeywordPatterns& builtin();
  static KeywordPatterns from_json(const Value& j);
};

struct PlaceboDecision {
  Verdict verdict = Verdict::unclear;
  std::optional<std::string> description;
};

// Open-label style wording anywhere -> No; else the first sentence naming a
// placebo -> Yes with that sentence; else No.
PlaceboDecision keyword_decision_tree(const Paper& paper, const KeywordPatterns& patterns = KeywordPatterns::builtin());

// Whole-paper chain: open question, classification, description. The paper
// is truncated so that every turn fits the context budget.
PlaceboDecision stuff_paper_baseline(const RunContext& ctx, const Paper& paper);

// Deletes [bracketed] spans and the single space before each.
std::string strip_bracketed(std::string_view text);

// Rewrites every paragraph after the first to stand alone given the
// preceding one. Rewrites
// that do not reduce to the original after strip_bracketed, and model
// failures, keep the original text.
Paper decontextualize(const RunContext& ctx, const Paper& paper);

enum class QaStrategy { elicit, perplexity, perplexity_prune, perplexity_fewshot };

// Single-question pipeline over one paper.
Answer answer_question(const RunContext& ctx, const Paper& paper, std::string_view question, QaStrategy strategy,
                       const std::vector<Demonstration>& demos = {});

Answer qasper_pipeline(const RunContext& ctx, const Paper& paper, std::string_view question,
                       const std::vector<Demonstration>& demos);

struct FlowEnumeration {
  std::vector<std::string> experiments;
  // Arms per experiment, in experiment order.
  std::vector<std::vector<std::string>> arms;
};

struct FlowUnit {
  corpus::Task task = corpus::Task::experiments;
  std::string unit_id;
  Value prediction;
  std::vector<std::string> support;
  std::optional<std::string> failure;
};

// Experiments, arms per experiment, and adherence per arm. The enumeration,
// when given, fixes which experiments and arms are asked about. Unit failures
// are recorded and the remaining units still run.
std::vector<FlowUnit> participant_flow_pipeline(const RunContext& ctx, const Paper& paper,
                                                const std::optional<FlowEnumeration>& enumeration,
                                                const std::vector<Demonstration>& pool, QaStrategy strategy);

std::string flow_unit_id(std::string_view experiment, std::string_view arm);

// Short error kind used in traces and results.
std::string error_kind(const std::exception& e);

}  // namespace decomp::recipes
