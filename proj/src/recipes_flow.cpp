#include <algorithm>
#include <cctype>
#include <random>

#include "decomp/parallel.hpp"
#include "decomp/recipes.hpp"
#include "recipes_internal.hpp"

namespace decomp::recipes {

using detail::call_lm;
using detail::guarded;
using detail::join;
using detail::trim;

namespace {

// Byte offset just past the n-th whitespace-delimited word.
std::size_t word_prefix_end(std::string_view text, std::size_t n) {
  std::size_t i = 0;
  std::size_t words = 0;
  while (i < text.size() && words < n) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i == text.size()) break;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    ++words;
  }
  return i;
}

std::size_t word_count(std::string_view text) {
  std::size_t n = 0;
  bool in = false;
  for (char c : text) {
    bool space = std::isspace(static_cast<unsigned char>(c));
    if (!space && !in) ++n;
    in = !space;
  }
  return n;
}

std::string collapse_ws(std::string_view s) {
  std::string out;
  bool pending = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending = !out.empty();
    } else {
      if (pending) out += ' ';
      pending = false;
      out += c;
    }
  }
  return out;
}

std::uint64_t hash64(std::string_view s) { return std::stoull(lm::sha256_hex(s).substr(0, 16), nullptr, 16); }

}  // namespace

PlaceboDecision stuff_paper_baseline(const RunContext& ctx, const Paper& paper) {
  trace::Scope scope(ctx.recorder, "stuff_paper_baseline", {{"paper_id", paper.paper_id}}, ctx.parent);
  return guarded(scope, [&] {
    auto child = ctx.under(scope);
    const auto& cfg = ctx.cfg();
    const std::size_t comp = static_cast<std::size_t>(cfg.completion_tokens);
    const std::size_t completion_words = comp * 3 / 4;

    std::vector<std::string> blocks{paper.title};
    for (const auto* p : paper.paragraphs()) blocks.push_back(p->text);
    const std::string full = join(blocks, "\n\n");
    const std::size_t total_words = word_count(full);

    const auto& open_t = ctx.prompt("stuff_paper_open");
    const auto& classify_t = ctx.prompt("stuff_paper_classify");
    const auto& describe_t = ctx.prompt("stuff_paper_describe");
    const std::size_t scaffold = lm::estimate_tokens(classify_t.render({{"conversation", ""}}).text) +
                                 lm::estimate_tokens(describe_t.render({{"conversation", ""}}).text);
    auto open_for = [&](std::size_t words) {
      return open_t.render({{"paper", full.substr(0, word_prefix_end(full, words))}});
    };
    // Every later turn adds one capped completion and one scaffold.
    auto fits = [&](std::size_t words) {
      return lm::estimate_tokens(open_for(words).text) + scaffold + 3 * comp <= cfg.context_tokens;
    };
    if (!fits(0)) throw UsageError("context budget too small for the whole-paper prompt");
    std::size_t lo = 0;
    std::size_t hi = total_words;
    while (lo < hi) {
      std::size_t mid = lo + (hi - lo + 1) / 2;
      if (fits(mid)) {
        lo = mid;
      } else {
        hi = mid - 1;
      }
    }
    scope.value("paper_words_kept", lo);
    scope.value("paper_words_total", total_words);

    auto capped = [&](std::string text) {
      if (word_count(text) > completion_words) {
        text.resize(word_prefix_end(text, completion_words));
        scope.value("completion_truncated", true);
      }
      return text;
    };

    auto turn1 = open_for(lo);
    auto c1 = capped(call_lm(child, "stuff_turn_open", turn1, "stuff/open", cfg.completion_tokens).response.text);
    auto turn2 = classify_t.render({{"conversation", turn1.text + c1}});
    auto c2 = capped(call_lm(child, "stuff_turn_classify", turn2, "stuff/classify", cfg.completion_tokens).response.text);
    PlaceboDecision d;
    d.verdict = parse_final_verdict(c2);
    if (d.verdict == Verdict::yes) {
      auto turn3 = describe_t.render({{"conversation", turn2.text + c2}});
      auto c3 = call_lm(child, "stuff_turn_describe", turn3, "stuff/describe", cfg.completion_tokens).response.text;
      d.description = trim(capped(c3));
    }
    Value out = {{"verdict", corpus::to_string(d.verdict)}};
    out["description"] = d.description ? Value(*d.description) : Value(nullptr);
    scope.finish(out);
    return d;
  });
}

std::string strip_bracketed(std::string_view text) {
  std::string out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '[') {
      int depth = 0;
      std::size_t j = i;
      for (; j < text.size(); ++j) {
        if (text[j] == '[') ++depth;
        if (text[j] == ']' && --depth == 0) break;
      }
      if (j < text.size()) {
        if (!out.empty() && out.back() == ' ') out.pop_back();
        i = j;
        continue;
      }
    }
    out += text[i];
  }
  return out;
}

Paper decontextualize(const RunContext& ctx, const Paper& paper) {
  trace::Scope scope(ctx.recorder, "decontextualize", {{"paper_id", paper.paper_id}}, ctx.parent);
  return guarded(scope, [&] {
    auto child = ctx.under(scope);
    auto paras = paper.paragraphs();
    const auto& tmpl = ctx.prompt("decontextualize");
    auto rewrites = parallel_map(paras.size(), ctx.cfg().concurrency_limit, [&](std::size_t i) {
      const auto* p = paras[i];
      if (i == 0) return p->text;
      trace::Scope s(child.recorder, "decontextualize_paragraph", {{"para_id", p->para_id}}, child.parent);
      const std::string& context = paras[i - 1]->text;
      std::string result = p->text;
      try {
        auto prompt = tmpl.render({{"context", context}, {"passage", p->text}});
        auto call = call_lm(child.under(s), "decontextualize_rewrite", prompt, "decontext/" + p->para_id,
                            ctx.cfg().completion_tokens);
        std::string rewrite = trim(call.response.text);
        if (!rewrite.empty() && collapse_ws(strip_bracketed(rewrite)) == collapse_ws(strip_bracketed(p->text))) {
          result = rewrite;
        } else {
          s.value("decontext_fallback", "mismatch");
        }
      } catch (const std::exception& e) {
        s.value("decontext_fallback", error_kind(e));
      }
      s.finish(result);
      return result;
    });

    Paper out = paper;
    std::size_t i = 0;
    for (auto& section : out.sections) {
      for (auto& p : section.paragraphs) {
        if (rewrites[i] != p.text) {
          p.text = rewrites[i];
          p.sentences = corpus::split_sentences(p.text);
        }
        ++i;
      }
    }
    scope.finish(nullptr);
    return out;
  });
}

namespace {

std::string_view strategy_name(QaStrategy s) {
  switch (s) {
    case QaStrategy::elicit:
      return "elicit";
    case QaStrategy::perplexity:
      return "perplexity";
    case QaStrategy::perplexity_prune:
      return "perplexity_prune";
    case QaStrategy::perplexity_fewshot:
      return "perplexity_fewshot";
  }
  return "?";
}

}  // namespace

Answer answer_question(const RunContext& ctx, const Paper& paper, std::string_view question, QaStrategy strategy,
                       const std::vector<Demonstration>& demos) {
  trace::Scope scope(ctx.recorder, "answer_question",
                     {{"paper_id", paper.paper_id}, {"question", question}, {"strategy", strategy_name(strategy)}},
                     ctx.parent);
  return guarded(scope, [&] {
    auto child = ctx.under(scope);
    std::vector<std::string> selected;
    std::vector<std::string> ranking;
    if (strategy == QaStrategy::elicit) {
      if (auto top = select_top1(paper, question)) selected.push_back(*top);
    } else {
      auto scores = perplexity_scores(child, paper, question);
      selected = select_below(scores, ctx.cfg().perplexity_threshold);
      std::vector<ScoredParagraph> sorted(scores.begin(), scores.end());
      std::stable_sort(sorted.begin(), sorted.end(),
                       [](const ScoredParagraph& a, const ScoredParagraph& b) { return a.score < b.score; });
      for (const auto& s : sorted) ranking.push_back(s.para_id);
      if (strategy == QaStrategy::perplexity_prune) selected = prune(child, paper, question, selected);
    }
    std::vector<const Paragraph*> excerpts;
    for (const auto* p : paper.paragraphs()) {
      if (std::find(selected.begin(), selected.end(), p->para_id) != selected.end()) excerpts.push_back(p);
    }
    const std::vector<Demonstration> none;
    auto a = answer_from_excerpts(child, question, paper.title, excerpts,
                                  strategy == QaStrategy::perplexity_fewshot ? demos : none, ranking);
    scope.finish(a.to_json());
    return a;
  });
}

Answer qasper_pipeline(const RunContext& ctx, const Paper& paper, std::string_view question,
                       const std::vector<Demonstration>& demos) {
  trace::Scope scope(ctx.recorder, "qasper", {{"paper_id", paper.paper_id}, {"question", question}}, ctx.parent);
  return guarded(scope, [&] {
    auto a = answer_question(ctx.under(scope), paper, question, QaStrategy::perplexity_fewshot, demos);
    scope.finish(a.to_json());
    return a;
  });
}

std::string question_for(const corpus::GoldRecord& g) {
  using corpus::Task;
  if (g.question) return *g.question;
  switch (g.task) {
    case Task::placebo_class:
    case Task::placebo_desc:
      return std::string(kPlaceboQuestion);
    case Task::experiments:
      return std::string(kExperimentsQuestion);
    case Task::arms:
      return flow_arms_question(g.unit_id);
    case Task::adherence: {
      auto bar = g.unit_id.find('|');
      if (bar == std::string::npos) return adherence_question("", g.unit_id);
      return adherence_question(std::string_view(g.unit_id).substr(0, bar),
                                std::string_view(g.unit_id).substr(bar + 1));
    }
    case Task::qasper:
      break;
  }
  throw ValidationError("qasper gold record " + g.paper_id + "/" + g.unit_id + " has no question");
}

std::vector<Demonstration> demonstrations_from_gold(const std::vector<corpus::GoldRecord>& gold,
                                                   const std::vector<Paper>& papers) {
  std::vector<Demonstration> out;
  for (const auto& g : gold) {
    if (g.evidence.empty() || g.task == corpus::Task::placebo_class) continue;
    std::string answer;
    if (g.label.is_string()) {
      answer = g.label.get<std::string>();
    } else if (g.label.is_array() && !g.label.empty()) {
      if (g.task == corpus::Task::qasper) {
        answer = g.label.front().is_string() ? g.label.front().get<std::string>() : g.label.front().dump();
      } else {
        std::vector<std::string> items;
        for (const auto& v : g.label) items.push_back(v.is_string() ? v.get<std::string>() : v.dump());
        answer = join(items, ", ");
      }
    }
    if (trim(answer).empty() || answer == "Unanswerable") continue;
    auto paper = std::find_if(papers.begin(), papers.end(), [&](const Paper& p) { return p.paper_id == g.paper_id; });
    if (paper == papers.end()) continue;
    Demonstration d{g.task, g.paper_id, question_for(g), {}, answer};
    bool complete = true;
    for (const auto& id : g.evidence) {
      const auto* p = paper->find(id);
      if (!p) {
        complete = false;
        break;
      }
      d.excerpts.push_back(p->text);
    }
    if (complete) out.push_back(std::move(d));
  }
  return out;
}

std::vector<Demonstration> sample_demonstrations(const std::vector<Demonstration>& pool, corpus::Task task,
                                                 std::size_t n, std::string_view exclude_paper,
                                                 std::string_view exclude_question, std::uint64_t seed) {
  std::vector<const Demonstration*> eligible;
  for (const auto& d : pool) {
    if (d.task != task || d.paper_id == exclude_paper || d.question == exclude_question) continue;
    eligible.push_back(&d);
  }
  std::mt19937_64 rng(seed ^ hash64(std::string(exclude_paper) + '\x1f' + std::string(exclude_question)));
  const std::size_t take = std::min(n, eligible.size());
  for (std::size_t i = 0; i < take; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng() % (eligible.size() - i));
    std::swap(eligible[i], eligible[j]);
  }
  std::vector<Demonstration> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back(*eligible[i]);
  return out;
}

std::vector<FlowUnit> participant_flow_pipeline(const RunContext& ctx, const Paper& paper,
                                                const std::optional<FlowEnumeration>& enumeration,
                                                const std::vector<Demonstration>& pool, QaStrategy strategy) {
  using corpus::Task;
  trace::Scope scope(ctx.recorder, "participant_flow", {{"paper_id", paper.paper_id}}, ctx.parent);
  return guarded(scope, [&] {
    auto child = ctx.under(scope);
    const auto& cfg = ctx.cfg();
    auto run_unit = [&](Task task, std::string unit_id, const std::string& question) {
      FlowUnit u;
      u.task = task;
      u.unit_id = std::move(unit_id);
      try {
        auto demos = sample_demonstrations(pool, task, static_cast<std::size_t>(cfg.demos_per_prompt),
                                           paper.paper_id, "", cfg.seed);
        auto a = answer_question(child, paper, question, strategy, demos);
        u.support = a.support;
        if (a.not_mentioned) {
          u.prediction = nullptr;
        } else if (task == Task::adherence) {
          u.prediction = a.text;
        } else {
          u.prediction = parse_list(a.text);
        }
      } catch (const std::exception& e) {
        u.failure = error_kind(e) + ": " + e.what();
      }
      return u;
    };
    auto names = [](const FlowUnit& u) {
      std::vector<std::string> out;
      if (u.prediction.is_array()) {
        for (const auto& v : u.prediction) out.push_back(v.get<std::string>());
      }
      return out;
    };

    std::vector<FlowUnit> units;
    units.push_back(run_unit(Task::experiments, "experiments", std::string(kExperimentsQuestion)));
    auto experiments = enumeration ? enumeration->experiments : names(units.back());

    auto arm_units = parallel_map(experiments.size(), cfg.concurrency_limit, [&](std::size_t i) {
      return run_unit(Task::arms, experiments[i], flow_arms_question(experiments[i]));
    });
    std::vector<std::pair<std::string, std::string>> pairs;
    for (std::size_t i = 0; i < experiments.size(); ++i) {
      auto arms = enumeration && i < enumeration->arms.size() ? enumeration->arms[i] : names(arm_units[i]);
      for (const auto& arm : arms) pairs.emplace_back(experiments[i], arm);
      units.push_back(std::move(arm_units[i]));
    }

    auto adherence = parallel_map(pairs.size(), cfg.concurrency_limit, [&](std::size_t i) {
      const auto& [exp, arm] = pairs[i];
      return run_unit(Task::adherence, flow_unit_id(exp, arm), adherence_question(exp, arm));
    });
    for (auto& u : adherence) units.push_back(std::move(u));

    scope.value("units", units.size());
    scope.finish(nullptr);
    return units;
  });
}

}  // namespace decomp::recipes
