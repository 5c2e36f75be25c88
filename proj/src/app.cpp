#include "decomp/app.hpp"

#include <cstdlib>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "decomp/errors.hpp"
#include "decomp/parallel.hpp"
#include "httplib.h"

namespace decomp::app {

namespace {

struct AgentFlags {
  std::string kind = "fixture";
  std::string fixtures;
  std::string match = "exact";
  std::string script;
  std::string endpoint = lm::RemoteConfig{}.endpoint;
  std::string model = lm::RemoteConfig{}.model;
  bool record = false;

  void add(CLI::App* cmd) {
    cmd->add_option("--agent", kind, "Language model backend")
        ->check(CLI::IsMember({"fixture", "remote", "scripted"}))
        ->capture_default_str();
    cmd->add_option("--fixtures", fixtures, "Fixture directory (read, or written with --record)");
    cmd->add_option("--match", match, "Fixture matching policy")
        ->check(CLI::IsMember({"exact", "route"}))
        ->capture_default_str();
    cmd->add_option("--script", script, "Rule script for the scripted backend");
    cmd->add_option("--endpoint", endpoint, "Completions endpoint for the remote backend")->capture_default_str();
    cmd->add_option("--model", model, "Model name for the remote backend")->capture_default_str();
    cmd->add_flag("--record", record, "Record every backend response into --fixtures");
  }

  lm::AgentSpec spec(int concurrency, bool needed = true) const {
    lm::AgentSpec s;
    s.kind = kind == "remote"     ? lm::AgentSpec::Kind::remote
             : kind == "scripted" ? lm::AgentSpec::Kind::scripted
                                  : lm::AgentSpec::Kind::fixture;
    s.fixture_dir = fixtures;
    s.match_policy = match == "route" ? lm::MatchPolicy::exact_then_route : lm::MatchPolicy::exact;
    s.script_path = script;
    s.record = record;
    s.remote.endpoint = endpoint;
    s.remote.model = model;
    s.remote.concurrency_limit = concurrency;
    if (const char* key = std::getenv("DECOMP_LM_API_KEY")) s.remote.api_key = key;
    if (!needed) return s;
    if (s.kind == lm::AgentSpec::Kind::fixture && fixtures.empty()) throw UsageError("--agent fixture needs --fixtures");
    if (s.kind == lm::AgentSpec::Kind::scripted && script.empty()) throw UsageError("--agent scripted needs --script");
    if (record && fixtures.empty()) throw UsageError("--record needs --fixtures");
    if (s.kind == lm::AgentSpec::Kind::remote && s.remote.api_key.empty()) {
      throw UsageError("--agent remote needs DECOMP_LM_API_KEY in the environment");
    }
    return s;
  }
};

struct ConfigFlags {
  std::string path;
  std::optional<double> threshold;
  std::optional<int> top_k;
  std::optional<int> concurrency;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* cmd) {
    cmd->add_option("--config", path, "JSON run configuration");
    cmd->add_option("--threshold", threshold, "Not-mentioned perplexity threshold");
    cmd->add_option("--top-k", top_k, "Paragraphs kept by pairwise ranking");
    cmd->add_option("--concurrency", concurrency, "Maximum parallel model calls");
    cmd->add_option("--seed", seed, "Seed for demonstration sampling");
  }

  recipes::RunConfig load() const {
    recipes::RunConfig c;
    if (!path.empty()) c = recipes::RunConfig::from_json(Value::parse(corpus::read_file(path)));
    if (threshold) c.perplexity_threshold = *threshold;
    if (top_k) c.top_k = *top_k;
    if (concurrency) c.concurrency_limit = *concurrency;
    if (seed) c.seed = *seed;
    c.validate();
    return c;
  }
};

std::optional<corpus::Task> task_of(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return corpus::parse_task(s);
}

void write_or_print(const std::string& out, const Value& doc) {
  if (out.empty()) {
    std::cout << doc.dump(2) << "\n";
  } else {
    write_atomic(out, doc.dump(2) + "\n");
  }
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Decomposed language-model pipelines for reading research papers"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "Run a recipe over a paper corpus");
  std::string recipe;
  std::string papers;
  std::string gold;
  std::string task;
  std::string out;
  std::string prompts_dir;
  AgentFlags agent;
  ConfigFlags config;
  run->add_option("--recipe", recipe, "Recipe name")->required();
  run->add_option("--papers", papers, "Paper file or directory")->required();
  run->add_option("--gold", gold, "Gold JSONL; fixes the units asked about");
  run->add_option("--task", task, "Task to answer when it cannot be read from --gold");
  run->add_option("--out", out, "Output directory")->required();
  run->add_option("--prompts", prompts_dir, "Directory overriding built-in prompt templates");
  agent.add(run);
  config.add(run);

  // eval
  auto* ev = app.add_subcommand("eval", "Score a results file against gold");
  std::string results;
  std::string adjudications;
  ev->add_option("--results", results, "results.jsonl")->required();
  ev->add_option("--gold", gold, "Gold JSONL")->required();
  ev->add_option("--task", task, "Only this task");
  ev->add_option("--adjudications", adjudications, "Per-unit correctness overrides (JSONL)");
  ev->add_option("--out", out, "Report path (stdout when omitted)");

  // compare
  auto* cmp = app.add_subcommand("compare", "Fisher exact test between two results files");
  std::string a_path;
  std::string b_path;
  cmp->add_option("--a", a_path, "First results file")->required();
  cmp->add_option("--b", b_path, "Second results file")->required();
  cmp->add_option("--gold", gold, "Gold JSONL")->required();
  cmp->add_option("--task", task, "Task to compare")->required();
  cmp->add_option("--out", out, "Report path (stdout when omitted)");

  // tune-threshold
  auto* tune = app.add_subcommand("tune-threshold", "Pick the perplexity threshold maximizing selection F2");
  std::string grid = "0.05:0.95:0.05";
  tune->add_option("--papers", papers, "Paper file or directory")->required();
  tune->add_option("--gold", gold, "Gold JSONL with evidence annotations")->required();
  tune->add_option("--task", task, "Only units of this task");
  tune->add_option("--grid", grid, "start:stop:step or a comma list")->capture_default_str();
  tune->add_option("--out", out, "Report path (stdout when omitted)");
  agent.add(tune);
  config.add(tune);

  // serve
  auto* serve = app.add_subcommand("serve", "Serve recorded traces over HTTP");
  std::string traces_dir;
  std::string static_dir;
  std::string host = "127.0.0.1";
  int port = 8080;
  serve->add_option("--traces", traces_dir, "Trace directory, or a run directory containing traces/")->required();
  serve->add_option("--static", static_dir, "Directory of static UI assets");
  serve->add_option("--host", host)->capture_default_str();
  serve->add_option("--port", port)->capture_default_str();

  auto* list = app.add_subcommand("recipes", "List recipe names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*run) {
      RunOptions opts;
      opts.recipe = recipe;
      opts.papers = papers;
      if (!gold.empty()) opts.gold = gold;
      opts.task = task_of(task);
      opts.config = config.load();
      opts.agent = agent.spec(opts.config.concurrency_limit, recipe != "keyword-tree");
      if (!prompts_dir.empty()) opts.prompts_dir = prompts_dir;
      opts.out = out;
      auto summary = run_recipe(opts);
      std::cerr << summary.rows.size() << " rows, " << summary.failures << " failed, traces in "
                << (opts.out / "traces").string() << "\n";
      return summary.exit_code;
    }
    if (*ev) {
      auto rows = eval::read_results_file(results);
      auto gold_records = corpus::read_gold_file(gold);
      std::vector<eval::Adjudication> adj;
      if (!adjudications.empty()) adj = eval::read_adjudications(adjudications);
      auto reports = evaluate(rows, gold_records, task_of(task), adj);
      for (const auto& r : reports) std::cerr << r.task << ": accuracy " << r.accuracy << " (n=" << r.n << ")\n";
      Value doc;
      if (reports.size() == 1) {
        doc = reports.front().to_json();
      } else {
        doc = Value::array();
        for (const auto& r : reports) doc.push_back(r.to_json());
      }
      write_or_print(out, doc);
      return kOk;
    }
    if (*cmp) {
      auto c = compare(eval::read_results_file(a_path), eval::read_results_file(b_path), corpus::read_gold_file(gold),
                       corpus::parse_task(task));
      std::cerr << "p = " << c.p_value << "\n";
      write_or_print(out, c.to_json());
      return kOk;
    }
    if (*tune) {
      auto cfg = config.load();
      auto thresholds = parse_grid(grid);
      auto paper_list = corpus::load_papers(papers);
      auto gold_records = corpus::read_gold_file(gold);
      auto only = task_of(task);
      std::vector<const corpus::GoldRecord*> units;
      for (const auto& g : gold_records) {
        if (g.evidence.empty() || (only && g.task != *only)) continue;
        if (g.task == corpus::Task::placebo_class) continue;
        units.push_back(&g);
      }
      if (units.empty()) throw ValidationError("gold has no units with evidence annotations");
      auto backend = lm::make_agent(agent.spec(cfg.concurrency_limit));
      recipes::RunContext ctx{backend.get(), nullptr, &cfg, nullptr, std::nullopt};
      auto scored = parallel_map(units.size(), cfg.concurrency_limit, [&](std::size_t i) {
        const auto* g = units[i];
        auto p = std::find_if(paper_list.begin(), paper_list.end(),
                              [&](const corpus::Paper& x) { return x.paper_id == g->paper_id; });
        if (p == paper_list.end()) throw ValidationError("gold references unknown paper " + g->paper_id);
        return ScoredUnit{g->paper_id, g->unit_id, recipes::perplexity_scores(ctx, *p, recipes::question_for(*g)),
                          g->evidence};
      });
      auto result = sweep_thresholds(scored, thresholds);
      std::cerr << "best threshold " << result.best_threshold << "\n";
      if (!config.path.empty()) {
        Value doc = fs::exists(config.path) ? Value::parse(corpus::read_file(config.path)) : Value::object();
        doc["perplexity_threshold"] = result.best_threshold;
        recipes::RunConfig::from_json(doc);
        write_atomic(config.path, doc.dump(2) + "\n");
      }
      write_or_print(out, result.to_json());
      return kOk;
    }
    if (*serve) {
      fs::path dir = traces_dir;
      if (fs::is_directory(dir / "traces")) dir /= "traces";
      httplib::Server server;
      configure_server(server, dir, static_dir.empty() ? std::nullopt : std::optional<fs::path>(static_dir));
      int bound = port;
      if (port == 0) {
        bound = server.bind_to_any_port(host);
      } else if (!server.bind_to_port(host, port)) {
        throw UsageError("cannot bind " + host + ":" + std::to_string(port));
      }
      std::cerr << "serving " << dir.string() << " on http://" << host << ":" << bound << "\n";
      return server.listen_after_bind() ? kOk : kInternal;
    }
    if (*list) {
      for (const auto& n : recipe_names()) std::cout << n << "\n";
      return kOk;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const VersionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed JSON: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}

}  // namespace decomp::app
