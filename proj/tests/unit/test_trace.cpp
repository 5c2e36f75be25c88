#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>
#include <thread>

#include "decomp/errors.hpp"
#include "decomp/trace.hpp"

using namespace decomp;
using namespace decomp::trace;

namespace {

Trace random_tree(std::size_t n, std::uint64_t seed) {
  Recorder rec("t-random", {{"recipe", "gen"}});
  std::mt19937_64 rng(seed);
  std::vector<CallId> stack;
  std::size_t made = 0;
  while (made < n || !stack.empty()) {
    bool open_new = made < n && (stack.empty() || rng() % 3 != 0);
    if (open_new) {
      std::optional<CallId> parent;
      if (!stack.empty()) parent = stack.back();
      auto id = rec.begin_call("f" + std::to_string(rng() % 7), {{"i", made}, {"s", "x\"y\n"}}, parent);
      if (rng() % 2) rec.record_value(id, "score", static_cast<double>(rng() % 1000) / 7.0);
      if (rng() % 4 == 0) {
        PromptTemplate t;
        t.literal("Q: ").interpolated("v" + std::to_string(made), "question");
        rec.record_template(id, t, "Q: v" + std::to_string(made));
      }
      stack.push_back(id);
      ++made;
    } else {
      auto id = stack.back();
      stack.pop_back();
      if (rng() % 5 == 0) {
        rec.fail_call(id, {"timeout", "slow"});
      } else {
        rec.end_call(id, Value{{"n", rng() % 100}, {"list", {1, 2.5, nullptr, true}}});
      }
    }
  }
  return rec.finalize();
}

}  // namespace

TEST(Recorder, FirstCallGetsSequenceOne) {
  Recorder rec;
  auto id = rec.begin_call("answer", {{"question", "q"}});
  auto t = (rec.end_call(id, 1), rec.finalize());
  ASSERT_EQ(t.calls.size(), 1u);
  EXPECT_EQ(t.calls[0].start_seq, 1u);
  EXPECT_EQ(t.calls[0].end_seq, 2u);
  EXPECT_EQ(t.root_ids, std::vector<CallId>{id});
}

TEST(Recorder, EndStoresOutput) {
  Recorder rec;
  auto id = rec.begin_call("f", Value::object());
  rec.end_call(id, 42);
  auto t = rec.finalize();
  EXPECT_EQ(t.calls[0].output, 42);
  EXPECT_EQ(t.calls[0].end_seq, 2u);
  EXPECT_FALSE(t.calls[0].error);
}

TEST(Recorder, BeginUnderEndedParentFails) {
  Recorder rec;
  auto p = rec.begin_call("p", Value::object());
  rec.end_call(p, nullptr);
  EXPECT_THROW(rec.begin_call("c", Value::object(), p), UsageError);
  EXPECT_THROW(rec.begin_call("c", Value::object(), CallId("nope")), UsageError);
}

TEST(Recorder, DoubleEndFails) {
  Recorder rec;
  auto id = rec.begin_call("f", Value::object());
  rec.end_call(id, 1);
  EXPECT_THROW(rec.end_call(id, 2), UsageError);
  EXPECT_THROW(rec.fail_call(id, {"x", "y"}), UsageError);
}

TEST(Recorder, EndWithOpenChildFails) {
  Recorder rec;
  auto p = rec.begin_call("p", Value::object());
  auto c = rec.begin_call("c", Value::object(), p);
  EXPECT_THROW(rec.end_call(p, 1), UsageError);
  EXPECT_THROW(rec.finalize(), UsageError);
  rec.end_call(c, 1);
  rec.end_call(p, 1);
  auto t = rec.finalize();
  EXPECT_EQ(t.calls[1].parent_id, p);
  EXPECT_LT(t.calls[1].end_seq, t.calls[0].end_seq);
}

TEST(Recorder, FailStoresErrorWithoutOutput) {
  Recorder rec;
  auto id = rec.begin_call("f", Value::object());
  rec.fail_call(id, {"timeout", "timeout"});
  auto t = rec.finalize();
  ASSERT_TRUE(t.calls[0].error);
  EXPECT_EQ(t.calls[0].error->message, "timeout");
  EXPECT_TRUE(t.calls[0].output.is_null());
}

TEST(Recorder, CustomValuesKeepOrder) {
  Recorder rec;
  auto id = rec.begin_call("f", Value::object());
  rec.record_value(id, "classification", "Yes");
  rec.record_value(id, "score", 0.25);
  rec.record_value(id, "classification", "No");
  rec.end_call(id, nullptr);
  auto t = rec.finalize();
  ASSERT_EQ(t.calls[0].custom_values.size(), 3u);
  EXPECT_EQ(t.calls[0].custom_values[0].first, "classification");
  EXPECT_EQ(*t.calls[0].custom_value("classification"), "No");
  EXPECT_EQ(t.calls[0].custom_value("missing"), nullptr);
}

TEST(Recorder, RecordValueOnClosedCallFails) {
  Recorder rec;
  auto id = rec.begin_call("f", Value::object());
  rec.end_call(id, nullptr);
  EXPECT_THROW(rec.record_value(id, "a", 1), UsageError);
}

TEST(Recorder, TemplateMustRenderToPrompt) {
  Recorder rec;
  auto id = rec.begin_call("f", Value::object());
  PromptTemplate t;
  t.literal("Q: ").interpolated("placebo?", "question");
  EXPECT_NO_THROW(rec.record_template(id, t, "Q: placebo?"));
  EXPECT_THROW(rec.record_template(id, t, "Q: arms?"), ValidationError);
  rec.end_call(id, nullptr);
  auto tr = rec.finalize();
  ASSERT_TRUE(tr.calls[0].prompt_template);
  EXPECT_EQ(tr.calls[0].prompt_template->render(), "Q: placebo?");
}

TEST(Recorder, ConcurrentBeginsAreDistinct) {
  Recorder rec;
  constexpr int kThreads = 8;
  constexpr int kPer = 1250;
  std::vector<std::vector<CallId>> ids(kThreads);
  {
    std::vector<std::jthread> threads;
    for (int t = 0; t < kThreads; ++t) {
      threads.emplace_back([&, t] {
        for (int i = 0; i < kPer; ++i) ids[t].push_back(rec.begin_call("f", Value::object()));
      });
    }
  }
  std::set<CallId> unique;
  for (auto& v : ids) {
    for (auto& id : v) {
      unique.insert(id);
      rec.end_call(id, nullptr);
    }
  }
  EXPECT_EQ(unique.size(), static_cast<std::size_t>(kThreads * kPer));
  auto t = rec.finalize();
  std::set<std::uint64_t> seqs;
  for (const auto& c : t.calls) {
    seqs.insert(c.start_seq);
    seqs.insert(c.end_seq);
  }
  EXPECT_EQ(seqs.size(), 2u * kThreads * kPer);
}

TEST(Scope, EndsOnScopeExitAndFailsOnException) {
  Recorder rec;
  {
    Scope outer(&rec, "outer", Value::object(), std::nullopt);
    try {
      Scope inner(&rec, "inner", Value::object(), outer.id());
      throw std::runtime_error("boom");
    } catch (const std::exception&) {
    }
    outer.finish("done");
  }
  auto t = rec.finalize();
  ASSERT_EQ(t.calls.size(), 2u);
  EXPECT_EQ(t.calls[0].output, "done");
  ASSERT_TRUE(t.calls[1].error);
  EXPECT_EQ(t.calls[1].error->kind, "exception");
  ASSERT_TRUE(t.calls[0].source_ref);
  EXPECT_NE(t.calls[0].source_ref->find("test_trace.cpp"), std::string::npos);
}

TEST(Scope, NullRecorderIsNoOp) {
  Scope s(nullptr, "f", Value::object(), std::nullopt);
  s.value("a", 1);
  s.finish(2);
  EXPECT_FALSE(s.id());
}

TEST(Export, EmptyTraceRoundTrips) {
  Recorder rec("empty");
  auto t = rec.finalize();
  auto bytes = export_trace(t);
  EXPECT_EQ(load_trace(bytes), t);
  EXPECT_EQ(export_trace(load_trace(bytes)), bytes);
}

TEST(Export, SingleCallRoundTrips) {
  Recorder rec("one", {{"recipe", "r"}});
  auto id = rec.begin_call("answer", {{"question", "q"}});
  rec.record_value(id, "score", 0.5);
  rec.end_call(id, "a");
  auto t = rec.finalize();
  EXPECT_EQ(load_trace(export_trace(t)), t);
}

TEST(Export, RandomTreeIsByteStable) {
  auto t = random_tree(1000, 7);
  ASSERT_EQ(t.calls.size(), 1000u);
  auto bytes = export_trace(t);
  auto back = load_trace(bytes);
  EXPECT_EQ(back, t);
  EXPECT_EQ(export_trace(back), bytes);
}

TEST(Export, FileFormatKeys) {
  Recorder rec("k");
  auto id = rec.begin_call("f", Value::object());
  PromptTemplate t;
  t.literal("a").interpolated("b", "x");
  rec.record_template(id, t, "ab");
  rec.record_value(id, "l", 1);
  rec.end_call(id, nullptr);
  auto doc = Value::parse(export_trace(rec.finalize()));
  for (const char* k : {"version", "trace_id", "created_at", "metadata", "calls"}) EXPECT_TRUE(doc.contains(k)) << k;
  EXPECT_EQ(doc["version"], 1);
  const auto& c = doc["calls"][0];
  for (const char* k : {"call_id", "parent_id", "name", "start_seq", "end_seq", "inputs", "output", "error",
                        "custom_values", "template", "source_ref"}) {
    EXPECT_TRUE(c.contains(k)) << k;
  }
  EXPECT_TRUE(c["parent_id"].is_null());
  EXPECT_EQ(c["custom_values"][0], Value::parse(R"(["l",1])"));
  EXPECT_EQ(c["template"][0]["kind"], "lit");
  EXPECT_EQ(c["template"][1]["kind"], "interp");
  EXPECT_EQ(c["template"][1]["expr"], "x");
}

TEST(Export, MalformedBytesReportPosition) {
  try {
    load_trace("{\"version\": 1, \"calls\": [");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_GT(e.position(), 0u);
  }
}

TEST(Export, UnknownVersionRejected) {
  auto doc = Value::parse(export_trace(Recorder("v").finalize()));
  doc["version"] = 2;
  try {
    load_trace(doc.dump());
    FAIL();
  } catch (const VersionError& e) {
    EXPECT_EQ(e.version(), 2);
  }
}

TEST(Export, RejectsBrokenInvariants) {
  auto doc = Value::parse(export_trace(random_tree(10, 1)));
  doc["calls"][1]["parent_id"] = "missing";
  EXPECT_THROW(load_trace(doc.dump()), ValidationError);
}

TEST(Query, FunctionCounts) {
  Recorder rec;
  for (const char* n : {"classify", "answer", "classify", "classify"}) rec.end_call(rec.begin_call(n, Value::object()), nullptr);
  auto counts = query_functions(rec.finalize());
  std::vector<FunctionCount> want{{"classify", 3}, {"answer", 1}};
  EXPECT_EQ(counts, want);
}

TEST(Query, SortByAbsentLabelKeepsOrder) {
  Recorder rec;
  for (int i = 0; i < 4; ++i) rec.end_call(rec.begin_call("f", {{"i", i}}), nullptr);
  auto calls = query_calls(rec.finalize(), "f", std::string("nope"));
  ASSERT_EQ(calls.size(), 4u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(calls[i].inputs["i"], i);
}

TEST(Query, SortAscendingWithMissingLast) {
  Recorder rec;
  std::vector<std::optional<double>> scores{0.7, std::nullopt, 0.2, 0.7, 0.1};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    auto id = rec.begin_call("s", {{"i", i}});
    if (scores[i]) rec.record_value(id, "score", *scores[i]);
    rec.end_call(id, nullptr);
  }
  auto calls = query_calls(rec.finalize(), "s", std::string("score"));
  std::vector<int> order;
  for (const auto& c : calls) order.push_back(c.inputs["i"].get<int>());
  EXPECT_EQ(order, (std::vector<int>{4, 2, 0, 3, 1}));
}

TEST(Query, FilterMatchesLinearScan) {
  Recorder rec;
  std::mt19937 rng(3);
  const char* labels[] = {"Yes", "No", "Unclear"};
  for (int i = 0; i < 200; ++i) {
    auto id = rec.begin_call(i % 3 ? "classify" : "other", {{"i", i}});
    if (rng() % 4) rec.record_value(id, "classification", labels[rng() % 3]);
    rec.end_call(id, nullptr);
  }
  auto t = rec.finalize();
  auto got = query_calls(t, "classify", std::nullopt, CallFilter{"classification", "Yes"});
  std::vector<CallId> oracle;
  for (const auto& c : t.calls) {
    if (c.name != "classify") continue;
    const Value* v = nullptr;
    for (const auto& [l, val] : c.custom_values) {
      if (l == "classification") v = &val;
    }
    if (v && v->is_string() && v->get<std::string>() == "Yes") oracle.push_back(c.call_id);
  }
  std::vector<CallId> ids;
  for (const auto& c : got) ids.push_back(c.call_id);
  EXPECT_EQ(ids, oracle);
  EXPECT_FALSE(ids.empty());
}

TEST(Query, ValueKeyForNonStrings) {
  EXPECT_EQ(value_key(Value("Yes")), "Yes");
  EXPECT_EQ(value_key(Value(3)), "3");
  EXPECT_EQ(value_key(Value(true)), "true");
}
