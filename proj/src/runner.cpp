#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "decomp/app.hpp"
#include "decomp/errors.hpp"
#include "decomp/parallel.hpp"

namespace decomp::app {

using corpus::GoldRecord;
using corpus::Paper;
using corpus::Task;
using eval::Prediction;

namespace {

enum class Family { placebo, flow, qasper };

struct RecipeSpec {
  std::string name;
  enum class Kind { decomposition, arms_only, paragraphs_only, keyword, stuff, qa, flow, qasper } kind;
  recipes::QaStrategy strategy = recipes::QaStrategy::perplexity;
  bool decontext = false;
};

const std::vector<RecipeSpec>& recipe_table() {
  using K = RecipeSpec::Kind;
  using S = recipes::QaStrategy;
  static const std::vector<RecipeSpec> table = {
      {"placebo-decomp", K::decomposition},
      {"placebo-arms", K::arms_only},
      {"placebo-paragraphs", K::paragraphs_only},
      {"keyword-tree", K::keyword},
      {"stuff-paper", K::stuff},
      {"elicit-baseline", K::qa, S::elicit},
      {"perplexity", K::qa, S::perplexity},
      {"perplexity-prune", K::qa, S::perplexity_prune},
      {"perplexity-fewshot", K::qa, S::perplexity_fewshot},
      {"decontext", K::qa, S::perplexity, true},
      {"participant-flow", K::flow, S::perplexity_fewshot},
      {"qasper", K::qasper, S::perplexity_fewshot},
  };
  return table;
}

const RecipeSpec& find_recipe(const std::string& name) {
  for (const auto& r : recipe_table()) {
    if (r.name == name) return r;
  }
  std::string known;
  for (const auto& r : recipe_table()) known += " " + r.name;
  throw UsageError("unknown recipe '" + name + "'; known:" + known);
}

Family family_of(Task t) {
  switch (t) {
    case Task::placebo_class:
    case Task::placebo_desc:
      return Family::placebo;
    case Task::experiments:
    case Task::arms:
    case Task::adherence:
      return Family::flow;
    case Task::qasper:
      return Family::qasper;
  }
  return Family::placebo;
}

std::string_view kind_name(lm::AgentSpec::Kind k) {
  switch (k) {
    case lm::AgentSpec::Kind::remote:
      return "remote";
    case lm::AgentSpec::Kind::fixture:
      return "fixture";
    case lm::AgentSpec::Kind::scripted:
      return "scripted";
  }
  return "?";
}

Value agent_json(const lm::AgentSpec& a) {
  Value j = {{"kind", kind_name(a.kind)}};
  if (a.kind == lm::AgentSpec::Kind::remote) {
    j["endpoint"] = a.remote.endpoint;
    j["model"] = a.remote.model;
  } else if (a.kind == lm::AgentSpec::Kind::fixture) {
    j["fixtures"] = a.fixture_dir.string();
    j["match"] = a.match_policy == lm::MatchPolicy::exact ? "exact" : "route";
  } else {
    j["script"] = a.script_path.string();
  }
  if (a.record) j["record"] = a.fixture_dir.string();
  return j;
}

struct PaperGold {
  std::vector<const GoldRecord*> records;

  std::vector<const GoldRecord*> of(Task t) const {
    std::vector<const GoldRecord*> out;
    for (const auto* g : records) {
      if (g->task == t) out.push_back(g);
    }
    return out;
  }
  bool has(Task t, const std::string& unit) const {
    return std::any_of(records.begin(), records.end(),
                       [&](const GoldRecord* g) { return g->task == t && g->unit_id == unit; });
  }
};

struct Job {
  const RecipeSpec* spec;
  std::set<Family> families;
  bool have_gold = false;
  const std::vector<recipes::Demonstration>* pool;
  std::optional<Task> task;

  // Without gold each paper is one unit of the requested task.
  Task placebo_task() const { return task == Task::placebo_desc ? Task::placebo_desc : Task::placebo_class; }
};

Prediction row(Task t, const Paper& p, std::string unit, Value prediction, std::vector<std::string> support = {}) {
  Prediction r;
  r.task = t;
  r.paper_id = p.paper_id;
  r.unit_id = std::move(unit);
  r.prediction = std::move(prediction);
  r.support = std::move(support);
  return r;
}

Value verdict_value(corpus::Verdict v) { return std::string(corpus::to_string(v)); }

// Units asked about for one family: the gold units when gold is given.
std::vector<Prediction> placebo_rows(const recipes::RunContext& ctx, const Job& job, const Paper& paper,
                                     const PaperGold& gold) {
  using K = RecipeSpec::Kind;
  std::vector<std::string> class_units;
  std::vector<std::string> desc_units;
  if (job.have_gold) {
    for (const auto* g : gold.of(Task::placebo_class)) class_units.push_back(g->unit_id);
    for (const auto* g : gold.of(Task::placebo_desc)) desc_units.push_back(g->unit_id);
  } else if (job.placebo_task() == Task::placebo_class) {
    class_units = {"trial"};
  } else {
    desc_units = {"trial"};
  }
  if (class_units.empty() && desc_units.empty()) return {};

  corpus::Verdict verdict = corpus::Verdict::unclear;
  Value description = nullptr;
  std::vector<std::string> class_support;
  std::vector<std::string> desc_support;
  switch (job.spec->kind) {
    case K::decomposition: {
      auto r = recipes::placebo_decomposition(ctx, paper);
      verdict = r.verdict;
      auto paras = paper.paragraphs();
      for (std::size_t i = 0; i < paras.size(); ++i) {
        if (r.paragraph_votes[i] == corpus::Verdict::yes) class_support.push_back(paras[i]->para_id);
      }
      if (r.description && !r.description->not_mentioned) {
        description = r.description->text;
        desc_support = r.description->support;
      }
      break;
    }
    case K::arms_only: {
      verdict = recipes::arms_pipeline(ctx, paper).verdict;
      if (auto d = recipes::describe_placebo(ctx, paper, verdict); d && !d->not_mentioned) {
        description = d->text;
        desc_support = d->support;
      }
      break;
    }
    case K::paragraphs_only: {
      auto paras = paper.paragraphs();
      auto votes = parallel_map(paras.size(), ctx.cfg().concurrency_limit, [&](std::size_t i) {
        return recipes::classify_paragraph_placebo(ctx, *paras[i]);
      });
      verdict = recipes::aggregate_paragraph_votes(votes);
      for (std::size_t i = 0; i < paras.size(); ++i) {
        if (votes[i] == corpus::Verdict::yes) class_support.push_back(paras[i]->para_id);
      }
      if (auto d = recipes::describe_placebo(ctx, paper, verdict); d && !d->not_mentioned) {
        description = d->text;
        desc_support = d->support;
      }
      break;
    }
    case K::keyword: {
      auto d = recipes::keyword_decision_tree(paper);
      verdict = d.verdict;
      if (d.description) {
        description = *d.description;
        for (const auto* p : paper.paragraphs()) {
          if (std::find(p->sentences.begin(), p->sentences.end(), *d.description) != p->sentences.end()) {
            desc_support.push_back(p->para_id);
            break;
          }
        }
      }
      break;
    }
    case K::stuff: {
      auto d = recipes::stuff_paper_baseline(ctx, paper);
      verdict = d.verdict;
      if (d.description) description = *d.description;
      break;
    }
    default: {
      Paper source = job.spec->decontext ? recipes::decontextualize(ctx, paper) : paper;
      auto a = recipes::answer_question(ctx, source, recipes::kPlaceboQuestion, job.spec->strategy,
                                        recipes::sample_demonstrations(
                                            *job.pool, Task::placebo_desc,
                                            static_cast<std::size_t>(ctx.cfg().demos_per_prompt), paper.paper_id, "",
                                            ctx.cfg().seed));
      verdict = a.not_mentioned ? corpus::Verdict::no : corpus::Verdict::yes;
      if (!a.not_mentioned) description = a.text;
      class_support = desc_support = a.support;
      break;
    }
  }

  std::vector<Prediction> rows;
  for (const auto& u : class_units) rows.push_back(row(Task::placebo_class, paper, u, verdict_value(verdict), class_support));
  for (const auto& u : desc_units) rows.push_back(row(Task::placebo_desc, paper, u, description, desc_support));
  return rows;
}

std::vector<Prediction> flow_rows(const recipes::RunContext& ctx, const Job& job, const Paper& paper,
                                  const PaperGold& gold) {
  std::optional<recipes::FlowEnumeration> enumeration;
  if (job.have_gold) {
    auto exps = gold.of(Task::experiments);
    if (exps.empty() && gold.of(Task::arms).empty() && gold.of(Task::adherence).empty()) return {};
    recipes::FlowEnumeration e;
    for (const auto* g : exps) {
      if (g->label.is_array()) {
        for (const auto& v : g->label) e.experiments.push_back(v.get<std::string>());
      }
    }
    for (const auto& name : e.experiments) {
      std::vector<std::string> arms;
      for (const auto* g : gold.of(Task::arms)) {
        if (g->unit_id == name && g->label.is_array()) {
          for (const auto& v : g->label) arms.push_back(v.get<std::string>());
        }
      }
      e.arms.push_back(std::move(arms));
    }
    enumeration = std::move(e);
  }
  Paper source = job.spec->decontext ? recipes::decontextualize(ctx, paper) : paper;
  auto units = recipes::participant_flow_pipeline(ctx, source, enumeration, *job.pool, job.spec->strategy);
  std::vector<Prediction> rows;
  for (auto& u : units) {
    if (job.have_gold && !gold.has(u.task, u.unit_id)) continue;
    auto r = row(u.task, paper, u.unit_id, u.prediction, u.support);
    r.failure = u.failure;
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<Prediction> qasper_rows(const recipes::RunContext& ctx, const Job& job, const Paper& paper,
                                    const PaperGold& gold) {
  auto questions = gold.of(Task::qasper);
  if (questions.empty()) return {};
  Paper source = job.spec->decontext ? recipes::decontextualize(ctx, paper) : paper;
  auto strategy = job.spec->kind == RecipeSpec::Kind::qasper ? recipes::QaStrategy::perplexity_fewshot
                                                            : job.spec->strategy;
  return parallel_map(questions.size(), ctx.cfg().concurrency_limit, [&](std::size_t i) {
    const auto* g = questions[i];
    auto q = recipes::question_for(*g);
    auto demos = recipes::sample_demonstrations(*job.pool, Task::qasper,
                                                static_cast<std::size_t>(ctx.cfg().demos_per_prompt), "", q,
                                                ctx.cfg().seed);
    try {
      auto a = job.spec->kind == RecipeSpec::Kind::qasper ? recipes::qasper_pipeline(ctx, source, q, demos)
                                                          : recipes::answer_question(ctx, source, q, strategy, demos);
      return row(Task::qasper, paper, g->unit_id, a.not_mentioned ? Value(nullptr) : Value(a.text), a.support);
    } catch (const std::exception& e) {
      auto r = row(Task::qasper, paper, g->unit_id, nullptr);
      r.failure = recipes::error_kind(e) + ": " + e.what();
      return r;
    }
  });
}

// Rows a failed paper still owes, so that evaluation sees every unit.
std::vector<Prediction> failed_rows(const Job& job, const Paper& paper, const PaperGold& gold, const std::string& why) {
  std::vector<Prediction> rows;
  if (job.have_gold) {
    for (const auto* g : gold.records) {
      if (!job.families.contains(family_of(g->task))) continue;
      rows.push_back(row(g->task, paper, g->unit_id, nullptr));
    }
  } else if (job.families.contains(Family::placebo)) {
    rows.push_back(row(job.placebo_task(), paper, "trial", nullptr));
  } else if (job.families.contains(Family::flow)) {
    rows.push_back(row(Task::experiments, paper, "experiments", nullptr));
  }
  for (auto& r : rows) r.failure = why;
  return rows;
}

}  // namespace

std::vector<std::string> recipe_names() {
  std::vector<std::string> out;
  for (const auto& r : recipe_table()) out.push_back(r.name);
  return out;
}

void write_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << bytes;
    if (!out) throw Error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string run_trace_id(const std::string& recipe, const std::string& paper_id, const RunOptions& opts) {
  Value cfg = opts.config.to_json();
  cfg.erase("concurrency_limit");
  return lm::sha256_hex(recipe + "\n" + paper_id + "\n" + std::string(kind_name(opts.agent.kind)) + "\n" + cfg.dump())
      .substr(0, 32);
}

RunSummary run_recipe(const RunOptions& opts, std::shared_ptr<lm::Agent> agent) {
  const RecipeSpec& spec = find_recipe(opts.recipe);
  opts.config.validate();
  const std::string started = trace::utc_now_rfc3339();

  auto papers = corpus::load_papers(opts.papers);
  if (papers.empty()) throw UsageError("no papers found in " + opts.papers.string());
  std::vector<GoldRecord> gold;
  if (opts.gold) gold = corpus::read_gold_file(*opts.gold);

  Job job{&spec, {}, opts.gold.has_value(), nullptr, opts.task};
  switch (spec.kind) {
    case RecipeSpec::Kind::flow:
      job.families = {Family::flow};
      break;
    case RecipeSpec::Kind::qasper:
      job.families = {Family::qasper};
      break;
    case RecipeSpec::Kind::qa:
      if (opts.task) {
        job.families = {family_of(*opts.task)};
      } else {
        for (const auto& g : gold) job.families.insert(family_of(g.task));
      }
      if (job.families.empty()) throw UsageError("recipe " + spec.name + " needs --task or a gold file");
      break;
    default:
      job.families = {Family::placebo};
  }
  if (job.families.contains(Family::qasper) && !opts.gold) {
    throw UsageError("qasper questions come from the gold file; pass --gold");
  }
  if (opts.task && family_of(*opts.task) == Family::placebo && !job.families.contains(Family::placebo)) {
    throw UsageError("recipe " + spec.name + " does not answer " + std::string(corpus::to_string(*opts.task)));
  }

  auto pool = recipes::demonstrations_from_gold(gold, papers);
  job.pool = &pool;
  std::map<std::string, PaperGold> by_paper;
  for (const auto& g : gold) by_paper[g.paper_id].records.push_back(&g);

  if (!agent && !(spec.kind == RecipeSpec::Kind::keyword)) agent = lm::make_agent(opts.agent);
  std::optional<prompts::PromptLibrary> library;
  if (opts.prompts_dir) library = prompts::PromptLibrary::from_directory(*opts.prompts_dir);

  const fs::path trace_dir = opts.out / "traces";
  fs::create_directories(trace_dir);

  struct PaperOutcome {
    std::vector<Prediction> rows;
    fs::path trace_path;
  };
  const PaperGold empty;
  auto outcomes = parallel_map(papers.size(), opts.config.concurrency_limit, [&](std::size_t i) {
    const Paper& paper = papers[i];
    auto git = by_paper.find(paper.paper_id);
    const PaperGold& pg = git == by_paper.end() ? empty : git->second;
    const std::string trace_id = run_trace_id(spec.name, paper.paper_id, opts);
    trace::Recorder recorder(trace_id, {{"recipe", spec.name},
                                        {"paper_id", paper.paper_id},
                                        {"agent", agent_json(opts.agent)},
                                        {"config", opts.config.to_json()}});
    recipes::RunContext ctx{agent.get(), &recorder, &opts.config, library ? &*library : nullptr, std::nullopt};

    PaperOutcome out;
    {
      trace::Scope root(&recorder, "run_paper", {{"recipe", spec.name}, {"paper_id", paper.paper_id}}, std::nullopt);
      auto child = ctx.under(root);
      try {
        if (job.families.contains(Family::placebo)) {
          auto r = placebo_rows(child, job, paper, pg);
          out.rows.insert(out.rows.end(), r.begin(), r.end());
        }
        if (job.families.contains(Family::flow)) {
          auto r = flow_rows(child, job, paper, pg);
          out.rows.insert(out.rows.end(), r.begin(), r.end());
        }
        if (job.families.contains(Family::qasper)) {
          auto r = qasper_rows(child, job, paper, pg);
          out.rows.insert(out.rows.end(), r.begin(), r.end());
        }
        root.finish({{"rows", out.rows.size()}});
      } catch (const std::exception& e) {
        root.fail({recipes::error_kind(e), e.what()});
        out.rows = failed_rows(job, paper, pg, recipes::error_kind(e) + ": " + e.what());
      }
    }
    for (auto& r : out.rows) r.trace_id = trace_id;
    out.trace_path = trace_dir / (paper.paper_id + ".json");
    write_atomic(out.trace_path, trace::export_trace(recorder.finalize()));
    return out;
  });

  RunSummary summary;
  for (auto& o : outcomes) {
    for (auto& r : o.rows) {
      if (r.failure) ++summary.failures;
      summary.rows.push_back(std::move(r));
    }
    summary.traces.push_back(o.trace_path);
  }
  const fs::path results = opts.out / "results.jsonl";
  write_atomic(results, eval::results_to_jsonl(summary.rows));
  summary.exit_code = summary.failures ? kPartial : kOk;

  Value traces = Value::array();
  for (const auto& t : summary.traces) traces.push_back(fs::relative(t, opts.out).generic_string());
  summary.manifest = {{"recipe", spec.name},
                      {"papers", opts.papers.string()},
                      {"gold", opts.gold ? Value(opts.gold->string()) : Value(nullptr)},
                      {"agent", agent_json(opts.agent)},
                      {"config", opts.config.to_json()},
                      {"started_at", started},
                      {"finished_at", trace::utc_now_rfc3339()},
                      {"results", "results.jsonl"},
                      {"traces", traces},
                      {"rows", summary.rows.size()},
                      {"failures", summary.failures},
                      {"exit_code", summary.exit_code}};
  write_atomic(opts.out / "manifest.json", summary.manifest.dump(2) + "\n");
  return summary;
}

std::vector<eval::EvalReport> evaluate(const std::vector<Prediction>& rows, const std::vector<GoldRecord>& gold,
                                       const std::optional<Task>& task,
                                       const std::vector<eval::Adjudication>& adjudications) {
  std::vector<Task> tasks;
  if (task) {
    tasks.push_back(*task);
  } else {
    for (Task t : {Task::placebo_class, Task::placebo_desc, Task::experiments, Task::arms, Task::adherence,
                   Task::qasper}) {
      bool in_rows = std::any_of(rows.begin(), rows.end(), [&](const Prediction& p) { return p.task == t; });
      if (in_rows) tasks.push_back(t);
    }
  }
  if (tasks.empty()) throw ValidationError("results file has no rows to evaluate");
  std::vector<eval::EvalReport> reports;
  for (Task t : tasks) reports.push_back(eval::accuracy(t, rows, gold, eval::default_matcher(t), adjudications));
  return reports;
}

Value Comparison::to_json() const {
  return {{"task", corpus::to_string(task)},
          {"accuracy_a", a.accuracy},
          {"accuracy_b", b.accuracy},
          {"n", a.n},
          {"table", {{table.a, table.b}, {table.c, table.d}}},
          {"p_value", p_value}};
}

Comparison compare(const std::vector<Prediction>& a, const std::vector<Prediction>& b,
                   const std::vector<GoldRecord>& gold, Task task) {
  Comparison c;
  c.task = task;
  c.a = eval::accuracy(task, a, gold, eval::default_matcher(task));
  c.b = eval::accuracy(task, b, gold, eval::default_matcher(task));
  auto count = [](const eval::EvalReport& r) {
    return static_cast<std::uint64_t>(std::count_if(r.per_unit.begin(), r.per_unit.end(),
                                                    [](const eval::UnitResult& u) { return u.correct; }));
  };
  c.table.a = count(c.a);
  c.table.b = c.a.n - c.table.a;
  c.table.c = count(c.b);
  c.table.d = c.b.n - c.table.c;
  c.p_value = eval::fisher_exact_two_sided(c.table);
  return c;
}

Value TuneResult::to_json() const {
  Value g = Value::array();
  for (const auto& p : grid) {
    g.push_back({{"threshold", p.threshold},
                 {"precision", p.precision},
                 {"recall", p.recall},
                 {"f2", p.f2},
                 {"selected", p.selected}});
  }
  return {{"best_threshold", best_threshold}, {"monotone", monotone}, {"units", units}, {"grid", g}};
}

TuneResult sweep_thresholds(const std::vector<ScoredUnit>& units, const std::vector<double>& grid) {
  if (units.empty()) throw ValidationError("no gold units with evidence annotations to tune on");
  if (grid.empty()) throw UsageError("empty threshold grid");
  std::vector<double> sorted = grid;
  std::sort(sorted.begin(), sorted.end());

  TuneResult r;
  r.units = units.size();
  std::vector<std::set<std::string>> previous(units.size());
  double best_f2 = -1.0;
  for (double tau : sorted) {
    std::size_t tp = 0;
    std::size_t selected = 0;
    std::size_t relevant = 0;
    for (std::size_t i = 0; i < units.size(); ++i) {
      auto sel = recipes::select_below(units[i].scores, tau);
      std::set<std::string> now;
      for (const auto& id : sel) now.insert(id);
      if (!std::includes(now.begin(), now.end(), previous[i].begin(), previous[i].end())) r.monotone = false;
      std::set<std::string> gold(units[i].evidence.begin(), units[i].evidence.end());
      for (const auto& id : sel) tp += gold.contains(id) ? 1 : 0;
      selected += sel.size();
      relevant += gold.size();
      previous[i] = std::move(now);
    }
    ThresholdPoint p;
    p.threshold = tau;
    p.selected = selected;
    p.precision = selected ? static_cast<double>(tp) / static_cast<double>(selected) : 0.0;
    p.recall = relevant ? static_cast<double>(tp) / static_cast<double>(relevant) : 0.0;
    p.f2 = eval::f_beta(p.precision, p.recall, 2.0);
    if (p.f2 > best_f2) {
      best_f2 = p.f2;
      r.best_threshold = tau;
    }
    r.grid.push_back(p);
  }
  return r;
}

std::vector<double> parse_grid(const std::string& spec) {
  std::vector<double> out;
  auto num = [](const std::string& s) {
    try {
      std::size_t used = 0;
      double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw UsageError("bad number in threshold grid: '" + s + "'");
    }
  };
  if (spec.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw UsageError("grid range must be start:stop:step");
    double start = num(parts[0]);
    double stop = num(parts[1]);
    double step = num(parts[2]);
    if (step <= 0 || stop < start) throw UsageError("grid range must be increasing with a positive step");
    for (long i = 0;; ++i) {
      double v = start + static_cast<double>(i) * step;
      if (v > stop + step * 1e-9) break;
      out.push_back(std::round(v * 1e9) / 1e9);
    }
  } else {
    std::stringstream ss(spec);
    for (std::string p; std::getline(ss, p, ',');) out.push_back(num(p));
  }
  for (double v : out) {
    if (!(v > 0.0 && v < 1.0)) throw UsageError("grid thresholds must lie in (0, 1)");
  }
  return out;
}

}  // namespace decomp::app
