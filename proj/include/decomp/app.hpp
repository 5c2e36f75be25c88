#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "decomp/corpus.hpp"
#include "decomp/eval.hpp"
#include "decomp/lm.hpp"
#include "decomp/recipes.hpp"

namespace httplib {
class Server;
}

namespace decomp::app {

namespace fs = std::filesystem;
using trace::Value;

enum ExitCode : int { kOk = 0, kPartial = 2, kUsage = 64, kInternal = 70 };

std::vector<std::string> recipe_names();

struct RunOptions {
  std::string recipe;
  fs::path papers;
  std::optional<fs::path> gold;
  std::optional<corpus::Task> task;
  lm::AgentSpec agent;
  recipes::RunConfig config;
  std::optional<fs::path> prompts_dir;
  fs::path out;
};

struct RunSummary {
  std::vector<eval::Prediction> rows;
  std::vector<fs::path> traces;
  std::size_t failures = 0;
  Value manifest;
  int exit_code = kOk;
};

// Stable per (recipe, paper, agent kind, config); independent of concurrency.
std::string run_trace_id(const std::string& recipe, const std::string& paper_id, const RunOptions& opts);

// Runs a recipe over every paper and writes results.jsonl, traces/ and
// manifest.json under opts.out. An explicit agent overrides opts.agent.
RunSummary run_recipe(const RunOptions& opts, std::shared_ptr<lm::Agent> agent = nullptr);

std::vector<eval::EvalReport> evaluate(const std::vector<eval::Prediction>& rows,
                                       const std::vector<corpus::GoldRecord>& gold,
                                       const std::optional<corpus::Task>& task,
                                       const std::vector<eval::Adjudication>& adjudications = {});

struct Comparison {
  corpus::Task task = corpus::Task::placebo_class;
  eval::EvalReport a;
  eval::EvalReport b;
  eval::ContingencyTable table;
  double p_value = 1.0;

  Value to_json() const;
};

Comparison compare(const std::vector<eval::Prediction>& a, const std::vector<eval::Prediction>& b,
                   const std::vector<corpus::GoldRecord>& gold, corpus::Task task);

struct ThresholdPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f2 = 0.0;
  std::size_t selected = 0;
};

struct TuneResult {
  std::vector<ThresholdPoint> grid;
  double best_threshold = 0.0;
  bool monotone = true;
  std::size_t units = 0;

  Value to_json() const;
};

// Evidence units: gold para_ids and the not-mentioned score of every paragraph.
struct ScoredUnit {
  std::string paper_id;
  std::string unit_id;
  std::vector<recipes::ScoredParagraph> scores;
  std::vector<std::string> evidence;
};

// Micro-averaged F2 of threshold selection over the grid; ties go to the
// smallest threshold. Also checks that selections grow with the threshold.
TuneResult sweep_thresholds(const std::vector<ScoredUnit>& units, const std::vector<double>& grid);
std::vector<double> parse_grid(const std::string& spec);

struct TraceIndexEntry {
  std::string id;
  std::string recipe;
  std::string paper_id;
  std::size_t call_count = 0;
  std::string created_at;
  fs::path path;
};

std::vector<TraceIndexEntry> index_traces(const fs::path& dir);

// Routes: GET /api/traces, GET /api/traces/{id}, static files or a
// placeholder page at /. Unknown routes answer 404 {"error":"not_found"}.
void configure_server(httplib::Server& server, const fs::path& traces_dir,
                      const std::optional<fs::path>& static_dir);

void write_atomic(const fs::path& path, const std::string& bytes);

// Command-line entry point; returns the process exit code.
int run_cli(int argc, char** argv);

}  // namespace decomp::app
