#include "decomp/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <tuple>
#include <sstream>

#include "decomp/errors.hpp"

namespace decomp::corpus {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string_view trim_view(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::yes:
      return "Yes";
    case Verdict::no:
      return "No";
    case Verdict::unclear:
      return "Unclear";
  }
  return "Unclear";
}

std::optional<Verdict> parse_verdict_word(std::string_view word) {
  const std::string w = lower(trim_view(word));
  if (w == "yes") return Verdict::yes;
  if (w == "no") return Verdict::no;
  if (w == "unclear") return Verdict::unclear;
  return std::nullopt;
}

std::vector<const Paragraph*> Paper::paragraphs() const {
  std::vector<const Paragraph*> out;
  for (const auto& s : sections) {
    for (const auto& p : s.paragraphs) out.push_back(&p);
  }
  return out;
}

const Paragraph* Paper::find(std::string_view para_id) const {
  for (const auto& s : sections) {
    for (const auto& p : s.paragraphs) {
      if (p.para_id == para_id) return &p;
    }
  }
  return nullptr;
}

std::optional<std::size_t> Paper::position(std::string_view para_id) const {
  std::size_t i = 0;
  for (const auto& s : sections) {
    for (const auto& p : s.paragraphs) {
      if (p.para_id == para_id) return i;
      ++i;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Sentences

namespace {

constexpr std::array kAbbreviations = {"e.g.", "i.e.", "fig.", "figs.", "al.",  "vs.",  "cf.", "approx.",
                                       "dr.",  "mr.",  "mrs.", "ms.",   "eq.",  "eqs.", "ref.", "resp."};

bool is_closer(char c) { return c == ')' || c == ']' || c == '"' || c == '\''; }

bool ends_with_abbreviation(std::string_view text, std::size_t dot) {
  std::size_t b = dot;
  while (b > 0 && !is_space(text[b - 1]) && text[b - 1] != '(' && text[b - 1] != '[') --b;
  const std::string word = lower(text.substr(b, dot - b + 1));
  return std::find(kAbbreviations.begin(), kAbbreviations.end(), word) != kAbbreviations.end();
}

}  // namespace

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  const std::size_t n = text.size();
  std::size_t start = 0;
  while (start < n && is_space(text[start])) ++start;
  for (std::size_t i = start; i < n; ++i) {
    const char c = text[i];
    if (c != '.' && c != '!' && c != '?') continue;
    std::size_t j = i + 1;
    while (j < n && (text[j] == '.' || text[j] == '!' || text[j] == '?')) ++j;
    while (j < n && is_closer(text[j])) ++j;
    if (j < n && !is_space(text[j])) continue;
    if (c == '.' && j == i + 1 && ends_with_abbreviation(text, i)) continue;
    std::size_t k = j;
    while (k < n && is_space(text[k])) ++k;
    if (k < n && std::islower(static_cast<unsigned char>(text[k]))) continue;
    const auto sentence = trim_view(text.substr(start, j - start));
    if (!sentence.empty()) out.emplace_back(sentence);
    start = k;
    i = k == 0 ? 0 : k - 1;
  }
  if (start < n) {
    const auto rest = trim_view(text.substr(start));
    if (!rest.empty()) out.emplace_back(rest);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Papers

namespace {

void finalize_paper(Paper& paper) {
  std::set<std::string> ids;
  std::size_t count = 0;
  for (std::size_t si = 0; si < paper.sections.size(); ++si) {
    auto& sec = paper.sections[si];
    for (std::size_t pi = 0; pi < sec.paragraphs.size(); ++pi) {
      auto& p = sec.paragraphs[pi];
      if (trim_view(p.text).empty()) throw ValidationError("paper " + paper.paper_id + ": empty paragraph");
      if (p.para_id.empty()) p.para_id = "s" + std::to_string(si) + ".p" + std::to_string(pi);
      if (!ids.insert(p.para_id).second) {
        throw ValidationError("paper " + paper.paper_id + ": duplicate paragraph id " + p.para_id);
      }
      p.sentences = split_sentences(p.text);
      ++count;
    }
  }
  if (count == 0) throw ValidationError("paper " + paper.paper_id + ": document has no paragraphs");
}

Paper ingest_plain(std::string_view bytes, std::string paper_id) {
  Paper paper;
  paper.paper_id = std::move(paper_id);
  std::istringstream in{std::string(bytes)};
  std::string line;
  std::string current;
  bool first_content = true;
  auto flush = [&] {
    if (current.empty()) return;
    if (paper.sections.empty()) paper.sections.push_back({});
    paper.sections.back().paragraphs.push_back({{}, current, {}});
    current.clear();
  };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto t = trim_view(line);
    if (first_content && !t.empty() && t.starts_with("Title: ")) {
      paper.title = std::string(trim_view(t.substr(7)));
      first_content = false;
      continue;
    }
    if (!t.empty()) first_content = false;
    if (line.starts_with("# ")) {
      flush();
      paper.sections.push_back({std::string(trim_view(std::string_view(line).substr(2))), {}});
    } else if (t.empty()) {
      flush();
    } else {
      if (!current.empty()) current += ' ';
      current += t;
    }
  }
  flush();
  finalize_paper(paper);
  return paper;
}

}  // namespace

Paper paper_from_json(const Value& doc) {
  if (!doc.is_object()) throw ValidationError("paper: document must be an object");
  Paper paper;
  try {
    paper.paper_id = doc.at("paper_id").get<std::string>();
    paper.title = doc.value("title", std::string());
    for (const auto& sj : doc.at("sections")) {
      Section sec;
      sec.heading = sj.value("heading", std::string());
      for (const auto& pj : sj.at("paragraphs")) {
        Paragraph p;
        if (pj.is_string()) {
          p.text = pj.get<std::string>();
        } else {
          p.para_id = pj.value("para_id", std::string());
          p.text = pj.at("text").get<std::string>();
        }
        sec.paragraphs.push_back(std::move(p));
      }
      paper.sections.push_back(std::move(sec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("paper: ") + e.what());
  }
  if (paper.paper_id.empty()) throw ValidationError("paper: empty paper_id");
  finalize_paper(paper);
  return paper;
}

Paper ingest_paper(std::string_view bytes, Format format, std::string paper_id) {
  if (trim_view(bytes).empty()) throw ValidationError("paper: empty document");
  if (format == Format::plain) {
    if (paper_id.empty()) paper_id = "paper";
    return ingest_plain(bytes, std::move(paper_id));
  }
  Value doc;
  try {
    doc = Value::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("paper: ") + e.what(), e.byte);
  }
  if (!paper_id.empty() && !doc.contains("paper_id")) doc["paper_id"] = paper_id;
  return paper_from_json(doc);
}

Value paper_to_json(const Paper& paper) {
  Value doc = Value::object();
  doc["paper_id"] = paper.paper_id;
  doc["title"] = paper.title;
  Value sections = Value::array();
  for (const auto& s : paper.sections) {
    Value paras = Value::array();
    for (const auto& p : s.paragraphs) paras.push_back(Value{{"para_id", p.para_id}, {"text", p.text}});
    sections.push_back(Value{{"heading", s.heading}, {"paragraphs", std::move(paras)}});
  }
  doc["sections"] = std::move(sections);
  return doc;
}

std::string export_paper_json(const Paper& paper) { return paper_to_json(paper).dump(2) + "\n"; }

std::vector<Paper> load_papers(const std::filesystem::path& path) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(path)) {
    for (const auto& e : std::filesystem::directory_iterator(path)) {
      const auto ext = e.path().extension();
      if (e.is_regular_file() && (ext == ".json" || ext == ".txt" || ext == ".md")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else if (std::filesystem::exists(path)) {
    files.push_back(path);
  } else {
    throw ValidationError("papers path not found: " + path.string());
  }
  std::vector<Paper> papers;
  for (const auto& f : files) {
    const auto fmt = f.extension() == ".json" ? Format::json : Format::plain;
    papers.push_back(ingest_paper(read_file(f), fmt, f.stem().string()));
  }
  return papers;
}

// ---------------------------------------------------------------------------
// Gold records

std::string_view to_string(Task t) {
  switch (t) {
    case Task::placebo_class:
      return "placebo_class";
    case Task::placebo_desc:
      return "placebo_desc";
    case Task::experiments:
      return "experiments";
    case Task::arms:
      return "arms";
    case Task::adherence:
      return "adherence";
    case Task::qasper:
      return "qasper";
  }
  return "placebo_class";
}

Task parse_task(std::string_view s) {
  for (Task t : {Task::placebo_class, Task::placebo_desc, Task::experiments, Task::arms, Task::adherence,
                 Task::qasper}) {
    if (to_string(t) == s) return t;
  }
  throw ValidationError("unknown task '" + std::string(s) + "'");
}

GoldRecord gold_from_json(const Value& j) {
  GoldRecord g;
  try {
    g.task = parse_task(j.at("task").get<std::string>());
    g.paper_id = j.at("paper_id").get<std::string>();
    g.unit_id = j.at("unit_id").get<std::string>();
    g.label = j.at("label");
    if (j.contains("evidence") && !j["evidence"].is_null()) g.evidence = j["evidence"].get<std::vector<std::string>>();
    if (j.contains("question") && j["question"].is_string()) g.question = j["question"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("gold record: ") + e.what());
  }
  if (g.task == Task::placebo_class &&
      (!g.label.is_string() || !parse_verdict_word(g.label.get<std::string>()))) {
    throw ValidationError("gold record " + g.unit_id + ": placebo_class label must be Yes, No or Unclear");
  }
  return g;
}

Value gold_to_json(const GoldRecord& g) {
  Value j = Value::object();
  j["task"] = to_string(g.task);
  j["paper_id"] = g.paper_id;
  j["unit_id"] = g.unit_id;
  j["label"] = g.label;
  if (!g.evidence.empty()) j["evidence"] = g.evidence;
  if (g.question) j["question"] = *g.question;
  return j;
}

std::vector<GoldRecord> parse_gold_jsonl(std::string_view text) {
  std::vector<GoldRecord> out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const auto line = trim_view(text.substr(pos, nl - pos));
    ++line_no;
    if (!line.empty()) {
      try {
        out.push_back(gold_from_json(Value::parse(line.begin(), line.end())));
      } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("gold line " + std::to_string(line_no) + ": " + e.what(), pos + e.byte);
      }
    }
    pos = nl + 1;
  }
  return out;
}

std::vector<GoldRecord> read_gold_file(const std::filesystem::path& path) {
  auto records = parse_gold_jsonl(read_file(path));
  validate_gold(records);
  return records;
}

std::string to_jsonl(const std::vector<GoldRecord>& records) {
  std::string out;
  for (const auto& g : records) out += gold_to_json(g).dump() + "\n";
  return out;
}

void validate_gold(const std::vector<GoldRecord>& records) {
  std::set<std::tuple<std::string, std::string, std::string>> keys;
  std::set<std::pair<std::string, std::string>> placebo_yes;
  for (const auto& g : records) {
    if (!keys.emplace(std::string(to_string(g.task)), g.paper_id, g.unit_id).second) {
      throw ValidationError("gold: duplicate unit " + std::string(to_string(g.task)) + "/" + g.paper_id + "/" +
                            g.unit_id);
    }
    if (g.task == Task::placebo_class && parse_verdict_word(g.label.get<std::string>()) == Verdict::yes) {
      placebo_yes.emplace(g.paper_id, g.unit_id);
    }
  }
  for (const auto& g : records) {
    if (g.task == Task::placebo_desc && !placebo_yes.contains({g.paper_id, g.unit_id})) {
      throw ValidationError("gold: placebo_desc for " + g.paper_id + "/" + g.unit_id +
                            " without a placebo_class Yes record");
    }
  }
}

// ---------------------------------------------------------------------------
// Qasper

std::string clean_qasper_text(std::string_view text) {
  static const std::regex ref(R"((BIBREF|TABREF|FIGREF)(\d+))");
  std::string out;
  std::string s(text);
  auto it = std::sregex_iterator(s.begin(), s.end(), ref);
  std::size_t last = 0;
  for (; it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    out.append(s, last, m.position(0) - last);
    const int n = std::stoi(m[2].str()) + 1;
    const std::string kind = m[1].str();
    if (kind == "BIBREF") {
      out += "[" + std::to_string(n) + "]";
    } else if (kind == "TABREF") {
      out += "Table " + std::to_string(n);
    } else {
      out += "Figure " + std::to_string(n);
    }
    last = m.position(0) + m.length(0);
  }
  out.append(s, last);
  return out;
}

namespace {

std::string answer_text(const Value& a) {
  if (a.value("unanswerable", false)) return "Unanswerable";
  if (a.contains("yes_no") && a["yes_no"].is_boolean()) return a["yes_no"].get<bool>() ? "Yes" : "No";
  const auto spans = a.value("extractive_spans", std::vector<std::string>{});
  if (!spans.empty()) {
    std::string joined;
    for (const auto& s : spans) {
      if (!joined.empty()) joined += ", ";
      joined += s;
    }
    return joined;
  }
  return a.value("free_form_answer", std::string());
}

}  // namespace

std::vector<QasperPaper> load_qasper(const Value& doc) {
  if (!doc.is_object()) throw ValidationError("qasper: document must be an object keyed by paper id");
  std::vector<QasperPaper> out;
  for (const auto& [paper_id, pj] : doc.items()) {
    QasperPaper qp;
    qp.paper.paper_id = paper_id;
    qp.paper.title = clean_qasper_text(pj.value("title", std::string()));
    std::map<std::string, std::string> text_to_id;
    const Value full_text = pj.value("full_text", Value::array());
    for (const auto& sj : full_text) {
      Section sec;
      sec.heading = clean_qasper_text(sj.value("section_name", std::string()));
      for (const auto& para : sj.value("paragraphs", Value::array())) {
        const std::string raw = para.get<std::string>();
        if (trim_view(raw).empty()) continue;
        sec.paragraphs.push_back({{}, clean_qasper_text(raw), {}});
      }
      qp.paper.sections.push_back(std::move(sec));
    }
    finalize_paper(qp.paper);
    for (const auto* p : qp.paper.paragraphs()) text_to_id.emplace(p->text, p->para_id);

    for (const auto& qj : pj.value("qas", Value::array())) {
      QasperQuestion q;
      q.question_id = qj.value("question_id", std::string());
      q.question = clean_qasper_text(qj.value("question", std::string()));
      bool needs_float = false;
      std::set<std::string> evidence;
      for (const auto& aj : qj.value("answers", Value::array())) {
        const Value a = aj.contains("answer") ? aj["answer"] : aj;
        for (const auto& ev : a.value("evidence", std::vector<std::string>{})) {
          if (ev.starts_with("FLOAT SELECTED")) {
            needs_float = true;
            continue;
          }
          if (auto it = text_to_id.find(clean_qasper_text(ev)); it != text_to_id.end()) evidence.insert(it->second);
        }
        const std::string t = clean_qasper_text(answer_text(a));
        if (!t.empty()) q.answers.push_back(t);
      }
      if (needs_float) {
        ++qp.dropped_questions;
        continue;
      }
      for (const auto* p : qp.paper.paragraphs()) {
        if (evidence.contains(p->para_id)) q.evidence.push_back(p->para_id);
      }
      qp.questions.push_back(std::move(q));
    }
    out.push_back(std::move(qp));
  }
  return out;
}

std::vector<GoldRecord> qasper_gold(const std::vector<QasperPaper>& papers) {
  std::vector<GoldRecord> out;
  for (const auto& qp : papers) {
    for (const auto& q : qp.questions) {
      GoldRecord g;
      g.task = Task::qasper;
      g.paper_id = qp.paper.paper_id;
      g.unit_id = q.question_id;
      g.label = q.answers;
      g.evidence = q.evidence;
      g.question = q.question;
      out.push_back(std::move(g));
    }
  }
  return out;
}

}  // namespace decomp::corpus
