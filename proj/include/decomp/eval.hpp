#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "decomp/corpus.hpp"
#include "decomp/trace.hpp"

namespace decomp::eval {

using trace::Value;

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Set-overlap P/R/F1. Empty gold with empty selection is (1,1,1); empty gold
// with a nonempty selection is (0,1,0).
Prf selection_prf(const std::set<std::string>& selected, const std::set<std::string>& gold);

// Weighted harmonic mean; 0 when both inputs are 0.
double f_beta(double precision, double recall, double beta);

// Lowercase, strip ASCII punctuation and the articles a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view text);
std::vector<std::string> answer_tokens(std::string_view text);

// Bag-of-tokens F1 after normalization, maximized over the gold answers.
// Throws UsageError when no gold answer is given.
double token_f1(std::string_view prediction, const std::vector<std::string>& gold_answers);

// 2x2 counts [[a, b], [c, d]]; rows are methods, columns correct/incorrect.
struct ContingencyTable {
  std::uint64_t a = 0;
  std::uint64_t b = 0;
  std::uint64_t c = 0;
  std::uint64_t d = 0;
};

// Two-sided p-value: total probability of all tables with the observed
// margins whose point probability does not exceed the observed one
// (relative slack 1e-7). Degenerate margins give 1.
double fisher_exact_two_sided(const ContingencyTable& table);

enum class Mention { mentioned, not_mentioned };

struct AdherenceCounts {
  std::size_t false_negative = 0;  // predicted not mentioned, gold mentioned
  std::size_t false_positive = 0;  // predicted mentioned, gold not mentioned
  std::size_t both_mentioned = 0;
  std::size_t both_not_mentioned = 0;
};

AdherenceCounts adherence_confusion(std::span<const Mention> predicted, std::span<const Mention> gold);

// One row of a results file.
struct Prediction {
  corpus::Task task = corpus::Task::placebo_class;
  std::string paper_id;
  std::string unit_id;
  Value prediction;  // null means "not mentioned" / no answer
  std::vector<std::string> support;
  std::string trace_id;
  // Set when the pipeline failed for this unit.
  std::optional<std::string> failure;
};

Value prediction_to_json(const Prediction& p);
Prediction prediction_from_json(const Value& j);
std::vector<Prediction> read_results_file(const std::filesystem::path& path);
std::string results_to_jsonl(const std::vector<Prediction>& rows);

enum class Matcher { exact, normalized, verdict };

Matcher default_matcher(corpus::Task task);

// Per-unit override of the automatic correctness judgment.
struct Adjudication {
  std::string unit_id;
  std::optional<std::string> paper_id;
  bool correct = false;
  std::string note;
};

std::vector<Adjudication> read_adjudications(const std::filesystem::path& path);

struct UnitResult {
  std::string paper_id;
  std::string unit_id;
  Value predicted;
  Value gold;
  bool correct = false;
  std::optional<std::string> error_category;
};

struct EvalReport {
  std::string task;
  std::size_t n = 0;
  double accuracy = 0.0;
  std::vector<UnitResult> per_unit;
  std::optional<Prf> selection_prf;
  std::optional<double> mean_token_f1;

  Value to_json() const;
};

// True when `predicted` matches `gold` under the matcher. Lists compare as
// normalized sets, except for qasper where the gold list holds alternatives.
bool matches(corpus::Task task, Matcher matcher, const Value& predicted, const Value& gold);

// Scores predictions against gold records of `task`. Throws ValidationError
// listing unit ids present on only one side.
EvalReport accuracy(corpus::Task task, const std::vector<Prediction>& predictions,
                    const std::vector<corpus::GoldRecord>& gold, Matcher matcher,
                    const std::vector<Adjudication>& adjudications = {});

}  // namespace decomp::eval
