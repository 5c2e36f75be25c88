#include "decomp/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>
#include <unordered_map>

#include "decomp/errors.hpp"

namespace decomp::eval {

using corpus::Task;

Prf selection_prf(const std::set<std::string>& selected, const std::set<std::string>& gold) {
  if (gold.empty()) return selected.empty() ? Prf{1.0, 1.0, 1.0} : Prf{0.0, 1.0, 0.0};
  std::size_t hit = 0;
  for (const auto& s : selected) hit += gold.count(s);
  Prf r;
  r.precision = selected.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(selected.size());
  r.recall = static_cast<double>(hit) / static_cast<double>(gold.size());
  r.f1 = f_beta(r.precision, r.recall, 1.0);
  return r;
}

double f_beta(double precision, double recall, double beta) {
  const double b2 = beta * beta;
  const double denom = b2 * precision + recall;
  return denom == 0.0 ? 0.0 : (1.0 + b2) * precision * recall / denom;
}

std::string normalize_answer(std::string_view text) {
  std::string s;
  s.reserve(text.size());
  for (unsigned char c : text) {
    if (std::ispunct(c)) continue;
    s += static_cast<char>(std::tolower(c));
  }
  std::istringstream words(s);
  std::string w;
  std::string out;
  while (words >> w) {
    if (w == "a" || w == "an" || w == "the") continue;
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::vector<std::string> answer_tokens(std::string_view text) {
  std::istringstream in(normalize_answer(text));
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

namespace {

double f1_single(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  if (pred.empty() || gold.empty()) return pred.empty() && gold.empty() ? 1.0 : 0.0;
  std::unordered_map<std::string, int> counts;
  for (const auto& t : gold) ++counts[t];
  std::size_t same = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++same;
    }
  }
  if (same == 0) return 0.0;
  const double p = static_cast<double>(same) / static_cast<double>(pred.size());
  const double r = static_cast<double>(same) / static_cast<double>(gold.size());
  return 2.0 * p * r / (p + r);
}

}  // namespace

double token_f1(std::string_view prediction, const std::vector<std::string>& gold_answers) {
  if (gold_answers.empty()) throw UsageError("token_f1 needs at least one gold answer");
  const auto pred = answer_tokens(prediction);
  double best = 0.0;
  for (const auto& g : gold_answers) best = std::max(best, f1_single(pred, answer_tokens(g)));
  return best;
}

double fisher_exact_two_sided(const ContingencyTable& t) {
  const std::uint64_t row1 = t.a + t.b;
  const std::uint64_t row2 = t.c + t.d;
  const std::uint64_t col1 = t.a + t.c;
  const std::uint64_t col2 = t.b + t.d;
  if (row1 == 0 || row2 == 0 || col1 == 0 || col2 == 0) return 1.0;
  const std::uint64_t n = row1 + row2;

  std::vector<double> log_fact(n + 1, 0.0);
  for (std::uint64_t i = 1; i <= n; ++i) log_fact[i] = log_fact[i - 1] + std::log(static_cast<double>(i));
  // log P(top-left = x) for the hypergeometric with these margins.
  auto log_p = [&](std::uint64_t x) {
    return log_fact[row1] + log_fact[row2] + log_fact[col1] + log_fact[col2] - log_fact[n] - log_fact[x] -
           log_fact[row1 - x] - log_fact[col1 - x] - log_fact[row2 - (col1 - x)];
  };

  const std::uint64_t lo = col1 > row2 ? col1 - row2 : 0;
  const std::uint64_t hi = std::min(row1, col1);
  const double observed = log_p(t.a);
  const double cutoff = observed + std::log1p(1e-7);
  double p = 0.0;
  for (std::uint64_t x = lo; x <= hi; ++x) {
    const double lp = log_p(x);
    if (lp <= cutoff) p += std::exp(lp);
  }
  return std::min(1.0, p);
}

AdherenceCounts adherence_confusion(std::span<const Mention> predicted, std::span<const Mention> gold) {
  if (predicted.size() != gold.size()) throw UsageError("adherence_confusion: sides differ in length");
  AdherenceCounts c;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool pm = predicted[i] == Mention::mentioned;
    const bool gm = gold[i] == Mention::mentioned;
    if (pm && gm) {
      ++c.both_mentioned;
    } else if (!pm && !gm) {
      ++c.both_not_mentioned;
    } else if (gm) {
      ++c.false_negative;
    } else {
      ++c.false_positive;
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Results files

Value prediction_to_json(const Prediction& p) {
  Value j = Value::object();
  j["task"] = corpus::to_string(p.task);
  j["paper_id"] = p.paper_id;
  j["unit_id"] = p.unit_id;
  j["prediction"] = p.prediction;
  j["support"] = p.support;
  j["trace_id"] = p.trace_id;
  if (p.failure) j["failure"] = *p.failure;
  return j;
}

Prediction prediction_from_json(const Value& j) {
  Prediction p;
  try {
    p.task = corpus::parse_task(j.at("task").get<std::string>());
    p.paper_id = j.at("paper_id").get<std::string>();
    p.unit_id = j.at("unit_id").get<std::string>();
    p.prediction = j.value("prediction", Value(nullptr));
    p.support = j.value("support", std::vector<std::string>{});
    p.trace_id = j.value("trace_id", std::string());
    if (j.contains("failure") && j["failure"].is_string()) p.failure = j["failure"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("results row: ") + e.what());
  }
  return p;
}

std::vector<Prediction> read_results_file(const std::filesystem::path& path) {
  const std::string text = corpus::read_file(path);
  std::vector<Prediction> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(prediction_from_json(Value::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + " line " + std::to_string(line_no) + ": " + e.what(), e.byte);
    }
  }
  return out;
}

std::string results_to_jsonl(const std::vector<Prediction>& rows) {
  std::string out;
  for (const auto& r : rows) out += prediction_to_json(r).dump() + "\n";
  return out;
}

std::vector<Adjudication> read_adjudications(const std::filesystem::path& path) {
  std::vector<Adjudication> out;
  std::istringstream in(corpus::read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const Value j = Value::parse(line);
      Adjudication a;
      a.unit_id = j.at("unit_id").get<std::string>();
      if (j.contains("paper_id") && j["paper_id"].is_string()) a.paper_id = j["paper_id"].get<std::string>();
      a.correct = j.at("correct").get<bool>();
      a.note = j.value("note", std::string());
      out.push_back(std::move(a));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("adjudication " + path.string() + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Accuracy

Matcher default_matcher(Task task) { return task == Task::placebo_class ? Matcher::verdict : Matcher::normalized; }

namespace {

std::set<std::string> normalized_set(const Value& v) {
  std::set<std::string> out;
  for (const auto& x : v) out.insert(normalize_answer(x.is_string() ? x.get<std::string>() : x.dump()));
  return out;
}

std::string as_text(const Value& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

bool mentioned(const Value& v) { return !v.is_null(); }

}  // namespace

bool matches(Task task, Matcher matcher, const Value& predicted, const Value& gold) {
  switch (matcher) {
    case Matcher::exact:
      return predicted == gold;
    case Matcher::verdict: {
      if (!predicted.is_string() || !gold.is_string()) return false;
      const auto p = corpus::parse_verdict_word(predicted.get<std::string>());
      const auto g = corpus::parse_verdict_word(gold.get<std::string>());
      return p && g && *p == *g;
    }
    case Matcher::normalized:
      break;
  }
  if (gold.is_null() || predicted.is_null()) return gold.is_null() && predicted.is_null();
  if (gold.is_array()) {
    if (task == Task::qasper) {
      const std::string p = normalize_answer(as_text(predicted));
      for (const auto& g : gold) {
        if (normalize_answer(as_text(g)) == p) return true;
      }
      return false;
    }
    return predicted.is_array() && normalized_set(predicted) == normalized_set(gold);
  }
  return normalize_answer(as_text(predicted)) == normalize_answer(as_text(gold));
}

Value EvalReport::to_json() const {
  Value j = Value::object();
  j["task"] = task;
  j["n"] = n;
  j["accuracy"] = accuracy;
  Value units = Value::array();
  for (const auto& u : per_unit) {
    Value uj = Value::object();
    uj["paper_id"] = u.paper_id;
    uj["unit_id"] = u.unit_id;
    uj["predicted"] = u.predicted;
    uj["gold"] = u.gold;
    uj["correct"] = u.correct;
    uj["error_category"] = u.error_category ? Value(*u.error_category) : Value(nullptr);
    units.push_back(std::move(uj));
  }
  j["per_unit"] = std::move(units);
  if (selection_prf) {
    j["selection_prf"] = Value{{"precision", selection_prf->precision},
                               {"recall", selection_prf->recall},
                               {"f1", selection_prf->f1}};
  } else {
    j["selection_prf"] = nullptr;
  }
  j["mean_token_f1"] = mean_token_f1 ? Value(*mean_token_f1) : Value(nullptr);
  return j;
}

EvalReport accuracy(Task task, const std::vector<Prediction>& predictions, const std::vector<corpus::GoldRecord>& gold,
                    Matcher matcher, const std::vector<Adjudication>& adjudications) {
  using Key = std::pair<std::string, std::string>;
  std::map<Key, const Prediction*> preds;
  for (const auto& p : predictions) {
    if (p.task == task) preds[{p.paper_id, p.unit_id}] = &p;
  }
  std::vector<const corpus::GoldRecord*> golds;
  std::set<Key> gold_keys;
  for (const auto& g : gold) {
    if (g.task != task) continue;
    golds.push_back(&g);
    gold_keys.insert({g.paper_id, g.unit_id});
  }

  std::string missing;
  for (const auto* g : golds) {
    if (!preds.contains({g->paper_id, g->unit_id})) missing += " " + g->paper_id + "/" + g->unit_id + "(no prediction)";
  }
  for (const auto& [k, _] : preds) {
    if (!gold_keys.contains(k)) missing += " " + k.first + "/" + k.second + "(no gold)";
  }
  if (!missing.empty()) throw ValidationError("unit mismatch for " + std::string(corpus::to_string(task)) + ":" + missing);

  EvalReport report;
  report.task = corpus::to_string(task);
  report.n = golds.size();
  const bool textual = task == Task::qasper || task == Task::placebo_desc || task == Task::adherence;
  double f1_sum = 0.0;
  Prf prf_sum;
  std::size_t prf_n = 0;
  std::size_t correct = 0;

  for (const auto* g : golds) {
    const Prediction& p = *preds.at({g->paper_id, g->unit_id});
    UnitResult u;
    u.paper_id = g->paper_id;
    u.unit_id = g->unit_id;
    u.predicted = p.prediction;
    u.gold = g->label;
    u.correct = !p.failure && matches(task, matcher, p.prediction, g->label);
    for (const auto& a : adjudications) {
      if (a.unit_id == g->unit_id && (!a.paper_id || *a.paper_id == g->paper_id)) u.correct = a.correct;
    }
    if (!u.correct) {
      if (p.failure) {
        u.error_category = "failure";
      } else if (task == Task::placebo_class) {
        const auto pv = p.prediction.is_string() ? corpus::parse_verdict_word(p.prediction.get<std::string>())
                                                 : std::nullopt;
        const auto gv = corpus::parse_verdict_word(g->label.get<std::string>());
        if (gv == corpus::Verdict::yes && pv == corpus::Verdict::no) {
          u.error_category = "false_negative";
        } else if (gv == corpus::Verdict::no && pv == corpus::Verdict::yes) {
          u.error_category = "false_positive";
        } else {
          u.error_category = "wrong_answer";
        }
      } else if (mentioned(g->label) && !mentioned(p.prediction)) {
        u.error_category = "false_negative";
      } else if (!mentioned(g->label) && mentioned(p.prediction)) {
        u.error_category = "false_positive";
      } else {
        u.error_category = "wrong_answer";
      }
    }
    if (u.correct) ++correct;

    if (textual) {
      std::vector<std::string> answers;
      if (g->label.is_array()) {
        for (const auto& a : g->label) answers.push_back(as_text(a));
      } else if (g->label.is_string()) {
        answers.push_back(g->label.get<std::string>());
      }
      const bool pred_null = p.prediction.is_null();
      if (answers.empty()) {
        f1_sum += pred_null ? 1.0 : 0.0;
      } else {
        f1_sum += pred_null ? 0.0 : token_f1(as_text(p.prediction), answers);
      }
    }
    if (!g->evidence.empty()) {
      const Prf r = selection_prf({p.support.begin(), p.support.end()}, {g->evidence.begin(), g->evidence.end()});
      prf_sum.precision += r.precision;
      prf_sum.recall += r.recall;
      prf_sum.f1 += r.f1;
      ++prf_n;
    }
    report.per_unit.push_back(std::move(u));
  }
  report.accuracy = report.n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(report.n);
  if (textual && report.n > 0) report.mean_token_f1 = f1_sum / static_cast<double>(report.n);
  if (prf_n > 0) {
    const double k = static_cast<double>(prf_n);
    report.selection_prf = Prf{prf_sum.precision / k, prf_sum.recall / k, prf_sum.f1 / k};
  }
  return report;
}

}  // namespace decomp::eval
