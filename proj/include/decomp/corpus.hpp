#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "decomp/trace.hpp"

namespace decomp::corpus {

using trace::Value;

enum class Verdict { yes, no, unclear };

std::string_view to_string(Verdict v);
// Case-insensitive "yes" / "no" / "unclear".
std::optional<Verdict> parse_verdict_word(std::string_view word);

struct Paragraph {
  std::string para_id;
  std::string text;
  std::vector<std::string> sentences;

  friend bool operator==(const Paragraph&, const Paragraph&) = default;
};

struct Section {
  std::string heading;
  std::vector<Paragraph> paragraphs;

  friend bool operator==(const Section&, const Section&) = default;
};

struct Paper {
  std::string paper_id;
  std::string title;
  std::vector<Section> sections;

  // All paragraphs in document order.
  std::vector<const Paragraph*> paragraphs() const;
  const Paragraph* find(std::string_view para_id) const;
  // Document position of a paragraph, if present.
  std::optional<std::size_t> position(std::string_view para_id) const;

  friend bool operator==(const Paper&, const Paper&) = default;
};

enum class Format { json, plain };

// Rule-based splitter: terminal punctuation followed by whitespace and a
// non-lowercase character ends a sentence, except after a small set of
// abbreviations (e.g., i.e., Fig., et al., ...). Sentences are trimmed
// substrings of `text` in order.
std::vector<std::string> split_sentences(std::string_view text);

// json: {"paper_id", "title", "sections": [{"heading", "paragraphs": [text | {"para_id"?, "text"}]}]}
// plain: optional "Title: ..." first line, "# " section headings, blank-line
// separated paragraphs. Missing ids become "s{i}.p{j}".
Paper ingest_paper(std::string_view bytes, Format format, std::string paper_id = {});
Paper paper_from_json(const Value& doc);
Value paper_to_json(const Paper& paper);
std::string export_paper_json(const Paper& paper);

// A .json file, a plain-text file, or a directory of them (sorted by name).
std::vector<Paper> load_papers(const std::filesystem::path& path);

enum class Task { placebo_class, placebo_desc, experiments, arms, adherence, qasper };

std::string_view to_string(Task t);
Task parse_task(std::string_view s);

// One expert answer. Labels by task: placebo_class "Yes"/"No"/"Unclear";
// placebo_desc a string; experiments and arms a list of names; adherence a
// string, or null when the paper does not mention it; qasper a list of
// acceptable answers.
struct GoldRecord {
  Task task = Task::placebo_class;
  std::string paper_id;
  std::string unit_id;
  Value label;
  std::vector<std::string> evidence;
  std::optional<std::string> question;

  friend bool operator==(const GoldRecord&, const GoldRecord&) = default;
};

GoldRecord gold_from_json(const Value& j);
Value gold_to_json(const GoldRecord& g);
std::vector<GoldRecord> parse_gold_jsonl(std::string_view text);
std::vector<GoldRecord> read_gold_file(const std::filesystem::path& path);
std::string to_jsonl(const std::vector<GoldRecord>& records);

// Throws ValidationError when a placebo_desc record has no matching
// placebo_class "Yes" record, or when (task, paper_id, unit_id) repeats.
void validate_gold(const std::vector<GoldRecord>& records);

// Replaces cross-reference tokens with natural-language equivalents:
// BIBREF0 -> [1], TABREF2 -> Table 3, FIGREF0 -> Figure 1.
std::string clean_qasper_text(std::string_view text);

struct QasperQuestion {
  std::string question_id;
  std::string question;
  std::vector<std::string> answers;
  std::vector<std::string> evidence;  // para_ids
};

struct QasperPaper {
  Paper paper;
  std::vector<QasperQuestion> questions;
  std::size_t dropped_questions = 0;  // evidence needed tables or figures
};

// Reads the Qasper release format (object keyed by paper id).
std::vector<QasperPaper> load_qasper(const Value& doc);
std::vector<GoldRecord> qasper_gold(const std::vector<QasperPaper>& papers);

std::string read_file(const std::filesystem::path& path);

}  // namespace decomp::corpus
