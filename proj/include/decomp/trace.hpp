#pragma once

#include <cstdint>
#include <exception>
#include <mutex>
#include <optional>
#include <source_location>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

namespace decomp::trace {

// JSON-like tagged union used for every recorded input, output and custom value.
using Value = nlohmann::ordered_json;
using CallId = std::string;

inline constexpr int kTraceFormatVersion = 1;

struct ErrorInfo {
  std::string kind;
  std::string message;

  friend bool operator==(const ErrorInfo&, const ErrorInfo&) = default;
};

// One piece of an interpolated prompt string.
struct Segment {
  enum class Kind { literal, interpolated };

  Kind kind = Kind::literal;
  std::string text;
  // Label of the interpolated expression; empty for literals.
  std::string expr;

  friend bool operator==(const Segment&, const Segment&) = default;
};

// Structure of an interpolated prompt. The concatenated segment texts are
// exactly the prompt that was sent to the model.
class PromptTemplate {
 public:
  PromptTemplate() = default;
  explicit PromptTemplate(std::vector<Segment> segments) : segments_(std::move(segments)) {}

  PromptTemplate& literal(std::string text);
  PromptTemplate& interpolated(std::string text, std::string expr);

  const std::vector<Segment>& segments() const { return segments_; }
  std::string render() const;

  friend bool operator==(const PromptTemplate&, const PromptTemplate&) = default;

 private:
  std::vector<Segment> segments_;
};

struct CallRecord {
  CallId call_id;
  std::optional<CallId> parent_id;
  std::string name;
  std::uint64_t start_seq = 0;
  std::uint64_t end_seq = 0;  // 0 while the call is open
  Value inputs = Value::object();
  Value output;  // null when the call failed
  std::optional<ErrorInfo> error;
  std::vector<std::pair<std::string, Value>> custom_values;
  std::optional<PromptTemplate> prompt_template;
  std::optional<std::string> source_ref;

  bool ended() const { return end_seq != 0; }
  // Last value recorded under `label`, if any.
  const Value* custom_value(std::string_view label) const;

  friend bool operator==(const CallRecord&, const CallRecord&) = default;
};

struct Trace {
  std::string trace_id;
  std::string created_at;  // RFC 3339, UTC
  std::vector<CallId> root_ids;
  std::vector<CallRecord> calls;  // start_seq order
  Value metadata = Value::object();

  const CallRecord* find(std::string_view call_id) const;

  friend bool operator==(const Trace&, const Trace&) = default;
};

// Thread-safe recorder. Every mutation takes one lock, so the sequence
// stamps it hands out form a single total order across threads.
class Recorder {
 public:
  explicit Recorder(std::string trace_id = {}, Value metadata = Value::object());

  Recorder(const Recorder&) = delete;
  Recorder& operator=(const Recorder&) = delete;

  CallId begin_call(std::string name, Value inputs, const std::optional<CallId>& parent = std::nullopt,
                    std::optional<std::string> source_ref = std::nullopt);
  void end_call(const CallId& id, Value output);
  void fail_call(const CallId& id, ErrorInfo error);

  void record_value(const CallId& id, std::string label, Value value);
  // Throws ValidationError unless the template renders to `prompt`.
  void record_template(const CallId& id, PromptTemplate tmpl, std::string_view prompt);

  void set_metadata(const std::string& key, Value value);

  std::size_t call_count() const;
  std::size_t open_call_count() const;

  // Snapshot of the finished trace. Throws UsageError while calls are open.
  Trace finalize() const;

 private:
  struct Slot {
    CallRecord record;
    std::size_t open_children = 0;
  };

  Slot& open_slot_locked(const CallId& id, const char* op);
  void close_locked(Slot& slot);

  mutable std::mutex mu_;
  std::string trace_id_;
  std::string created_at_;
  Value metadata_;
  std::uint64_t next_seq_ = 1;
  std::size_t open_ = 0;
  std::vector<Slot> slots_;
  std::unordered_map<CallId, std::size_t> index_;
};

// RAII handle for one traced call. A scope that is destroyed without
// finish()/fail() ends the call with a null output, or fails it when the
// scope is unwinding because of an exception. A null recorder makes every
// operation a no-op.
class Scope {
 public:
  Scope(Recorder* recorder, std::string name, Value inputs, const std::optional<CallId>& parent,
        std::source_location loc = std::source_location::current());
  ~Scope();

  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

  const std::optional<CallId>& id() const { return id_; }
  Recorder* recorder() const { return recorder_; }

  void value(std::string label, Value v);
  void prompt(const PromptTemplate& tmpl, std::string_view text);
  void finish(Value output);
  void fail(ErrorInfo error);

 private:
  Recorder* recorder_;
  std::optional<CallId> id_;
  bool closed_ = false;
  int uncaught_ = 0;
};

std::string export_trace(const Trace& trace);
Trace load_trace(std::string_view bytes);

Value to_json(const Trace& trace);
Trace from_json(const Value& doc);

struct FunctionCount {
  std::string name;
  std::size_t count = 0;

  friend bool operator==(const FunctionCount&, const FunctionCount&) = default;
};

// All recorded function names with call counts, most-called first; ties keep
// the order of first appearance.
std::vector<FunctionCount> query_functions(const Trace& trace);

struct CallFilter {
  std::string label;
  std::string value;
};

// Calls to `name`, optionally filtered on an exact custom-value match and
// stably sorted ascending by a custom-value label. Calls lacking the sort
// label go last in start_seq order.
std::vector<CallRecord> query_calls(const Trace& trace, std::string_view name,
                                    const std::optional<std::string>& sort_label = std::nullopt,
                                    const std::optional<CallFilter>& filter = std::nullopt);

// String used for filter matching: strings compare by content, everything
// else by its compact JSON form.
std::string value_key(const Value& v);

std::string utc_now_rfc3339();

}  // namespace decomp::trace
