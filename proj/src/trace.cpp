#include "decomp/trace.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <random>

#include "decomp/errors.hpp"

namespace decomp::trace {

PromptTemplate& PromptTemplate::literal(std::string text) {
  segments_.push_back({Segment::Kind::literal, std::move(text), {}});
  return *this;
}

PromptTemplate& PromptTemplate::interpolated(std::string text, std::string expr) {
  segments_.push_back({Segment::Kind::interpolated, std::move(text), std::move(expr)});
  return *this;
}

std::string PromptTemplate::render() const {
  std::string out;
  for (const auto& s : segments_) out += s.text;
  return out;
}

const Value* CallRecord::custom_value(std::string_view label) const {
  for (auto it = custom_values.rbegin(); it != custom_values.rend(); ++it) {
    if (it->first == label) return &it->second;
  }
  return nullptr;
}

const CallRecord* Trace::find(std::string_view call_id) const {
  for (const auto& c : calls) {
    if (c.call_id == call_id) return &c;
  }
  return nullptr;
}

std::string utc_now_rfc3339() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

std::string random_trace_id() {
  std::random_device rd;
  std::uniform_int_distribution<int> nibble(0, 15);
  std::string id(32, '0');
  for (auto& ch : id) ch = "0123456789abcdef"[nibble(rd)];
  return id;
}

}  // namespace

// ---------------------------------------------------------------------------
// Recorder

Recorder::Recorder(std::string trace_id, Value metadata)
    : trace_id_(trace_id.empty() ? random_trace_id() : std::move(trace_id)),
      created_at_(utc_now_rfc3339()),
      metadata_(metadata.is_object() ? std::move(metadata) : Value::object()) {}

Recorder::Slot& Recorder::open_slot_locked(const CallId& id, const char* op) {
  auto it = index_.find(id);
  if (it == index_.end()) throw UsageError(std::string(op) + ": unknown call " + id);
  Slot& slot = slots_[it->second];
  if (slot.record.ended()) throw UsageError(std::string(op) + ": call " + id + " already ended");
  return slot;
}

CallId Recorder::begin_call(std::string name, Value inputs, const std::optional<CallId>& parent,
                            std::optional<std::string> source_ref) {
  std::lock_guard lock(mu_);
  if (parent) {
    Slot& p = open_slot_locked(*parent, "begin_call");
    ++p.open_children;
  }
  const std::uint64_t seq = next_seq_++;
  CallRecord rec;
  rec.call_id = "c" + std::to_string(seq);
  rec.parent_id = parent;
  rec.name = std::move(name);
  rec.start_seq = seq;
  rec.inputs = inputs.is_null() ? Value::object() : std::move(inputs);
  rec.source_ref = std::move(source_ref);
  index_.emplace(rec.call_id, slots_.size());
  CallId id = rec.call_id;
  slots_.push_back({std::move(rec), 0});
  ++open_;
  return id;
}

void Recorder::close_locked(Slot& slot) {
  if (slot.open_children != 0) {
    throw UsageError("call " + slot.record.call_id + " has " + std::to_string(slot.open_children) +
                     " open children");
  }
  slot.record.end_seq = next_seq_++;
  --open_;
  if (slot.record.parent_id) {
    --slots_[index_.at(*slot.record.parent_id)].open_children;
  }
}

void Recorder::end_call(const CallId& id, Value output) {
  std::lock_guard lock(mu_);
  Slot& slot = open_slot_locked(id, "end_call");
  close_locked(slot);
  slot.record.output = std::move(output);
}

void Recorder::fail_call(const CallId& id, ErrorInfo error) {
  std::lock_guard lock(mu_);
  Slot& slot = open_slot_locked(id, "fail_call");
  close_locked(slot);
  slot.record.output = nullptr;
  slot.record.error = std::move(error);
}

void Recorder::record_value(const CallId& id, std::string label, Value value) {
  std::lock_guard lock(mu_);
  open_slot_locked(id, "record_value").record.custom_values.emplace_back(std::move(label), std::move(value));
}

void Recorder::record_template(const CallId& id, PromptTemplate tmpl, std::string_view prompt) {
  if (tmpl.render() != prompt) {
    throw ValidationError("prompt template does not concatenate to the recorded prompt");
  }
  std::lock_guard lock(mu_);
  open_slot_locked(id, "record_template").record.prompt_template = std::move(tmpl);
}

void Recorder::set_metadata(const std::string& key, Value value) {
  std::lock_guard lock(mu_);
  metadata_[key] = std::move(value);
}

std::size_t Recorder::call_count() const {
  std::lock_guard lock(mu_);
  return slots_.size();
}

std::size_t Recorder::open_call_count() const {
  std::lock_guard lock(mu_);
  return open_;
}

Trace Recorder::finalize() const {
  std::lock_guard lock(mu_);
  if (open_ != 0) {
    throw UsageError("cannot finalize trace with " + std::to_string(open_) + " open calls");
  }
  Trace t;
  t.trace_id = trace_id_;
  t.created_at = created_at_;
  t.metadata = metadata_;
  t.calls.reserve(slots_.size());
  for (const auto& s : slots_) {
    if (!s.record.parent_id) t.root_ids.push_back(s.record.call_id);
    t.calls.push_back(s.record);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Scope

Scope::Scope(Recorder* recorder, std::string name, Value inputs, const std::optional<CallId>& parent,
             std::source_location loc)
    : recorder_(recorder), uncaught_(std::uncaught_exceptions()) {
  if (!recorder_) return;
  std::string ref = std::filesystem::path(loc.file_name()).filename().string() + ":" + std::to_string(loc.line());
  id_ = recorder_->begin_call(std::move(name), std::move(inputs), parent, std::move(ref));
}

Scope::~Scope() {
  if (!id_ || closed_) return;
  try {
    if (std::uncaught_exceptions() > uncaught_) {
      recorder_->fail_call(*id_, {"exception", "scope unwound by exception"});
    } else {
      recorder_->end_call(*id_, nullptr);
    }
  } catch (...) {
    // Destructors must not throw; the recorder keeps the call open and
    // finalize() reports it.
  }
}

void Scope::value(std::string label, Value v) {
  if (id_) recorder_->record_value(*id_, std::move(label), std::move(v));
}

void Scope::prompt(const PromptTemplate& tmpl, std::string_view text) {
  if (id_) recorder_->record_template(*id_, tmpl, text);
}

void Scope::finish(Value output) {
  if (!id_ || closed_) return;
  closed_ = true;
  recorder_->end_call(*id_, std::move(output));
}

void Scope::fail(ErrorInfo error) {
  if (!id_ || closed_) return;
  closed_ = true;
  recorder_->fail_call(*id_, std::move(error));
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

Value optional_string(const std::optional<std::string>& s) { return s ? Value(*s) : Value(nullptr); }

Value call_to_json(const CallRecord& c) {
  Value j = Value::object();
  j["call_id"] = c.call_id;
  j["parent_id"] = optional_string(c.parent_id);
  j["name"] = c.name;
  j["start_seq"] = c.start_seq;
  j["end_seq"] = c.end_seq;
  j["inputs"] = c.inputs;
  j["output"] = c.output;
  if (c.error) {
    j["error"] = Value{{"kind", c.error->kind}, {"message", c.error->message}};
  } else {
    j["error"] = nullptr;
  }
  Value cv = Value::array();
  for (const auto& [label, v] : c.custom_values) cv.push_back(Value::array({label, v}));
  j["custom_values"] = std::move(cv);
  if (c.prompt_template) {
    Value segs = Value::array();
    for (const auto& s : c.prompt_template->segments()) {
      Value seg = Value::object();
      seg["kind"] = s.kind == Segment::Kind::literal ? "lit" : "interp";
      seg["text"] = s.text;
      seg["expr"] = s.kind == Segment::Kind::literal ? Value(nullptr) : Value(s.expr);
      segs.push_back(std::move(seg));
    }
    j["template"] = std::move(segs);
  } else {
    j["template"] = nullptr;
  }
  j["source_ref"] = optional_string(c.source_ref);
  return j;
}

const Value& member(const Value& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(std::string("trace: missing key '") + key + "'");
  return *it;
}

std::string string_member(const Value& obj, const char* key) {
  const Value& v = member(obj, key);
  if (!v.is_string()) throw ValidationError(std::string("trace: '") + key + "' must be a string");
  return v.get<std::string>();
}

std::optional<std::string> nullable_string(const Value& obj, const char* key) {
  const Value& v = member(obj, key);
  if (v.is_null()) return std::nullopt;
  if (!v.is_string()) throw ValidationError(std::string("trace: '") + key + "' must be a string or null");
  return v.get<std::string>();
}

std::uint64_t seq_member(const Value& obj, const char* key) {
  const Value& v = member(obj, key);
  if (!v.is_number_unsigned()) throw ValidationError(std::string("trace: '") + key + "' must be a positive integer");
  return v.get<std::uint64_t>();
}

CallRecord call_from_json(const Value& j) {
  if (!j.is_object()) throw ValidationError("trace: call must be an object");
  CallRecord c;
  c.call_id = string_member(j, "call_id");
  c.parent_id = nullable_string(j, "parent_id");
  c.name = string_member(j, "name");
  c.start_seq = seq_member(j, "start_seq");
  c.end_seq = seq_member(j, "end_seq");
  c.inputs = member(j, "inputs");
  c.output = member(j, "output");
  const Value& err = member(j, "error");
  if (!err.is_null()) c.error = ErrorInfo{string_member(err, "kind"), string_member(err, "message")};
  for (const auto& pair : member(j, "custom_values")) {
    if (!pair.is_array() || pair.size() != 2 || !pair[0].is_string()) {
      throw ValidationError("trace: custom_values entries must be [label, value]");
    }
    c.custom_values.emplace_back(pair[0].get<std::string>(), pair[1]);
  }
  const Value& tmpl = member(j, "template");
  if (!tmpl.is_null()) {
    PromptTemplate t;
    for (const auto& seg : tmpl) {
      const std::string kind = string_member(seg, "kind");
      if (kind == "lit") {
        t.literal(string_member(seg, "text"));
      } else if (kind == "interp") {
        t.interpolated(string_member(seg, "text"), string_member(seg, "expr"));
      } else {
        throw ValidationError("trace: unknown template segment kind '" + kind + "'");
      }
    }
    c.prompt_template = std::move(t);
  }
  c.source_ref = nullable_string(j, "source_ref");
  return c;
}

void check_structure(const Trace& t) {
  std::unordered_map<std::string_view, const CallRecord*> seen;
  std::uint64_t last = 0;
  for (const auto& c : t.calls) {
    if (c.start_seq <= last) throw ValidationError("trace: calls not in start_seq order");
    last = c.start_seq;
    if (c.end_seq <= c.start_seq) throw ValidationError("trace: call " + c.call_id + " has end_seq <= start_seq");
    if (c.parent_id) {
      auto it = seen.find(*c.parent_id);
      if (it == seen.end()) throw ValidationError("trace: parent of " + c.call_id + " does not precede it");
      if (c.end_seq > it->second->end_seq) throw ValidationError("trace: " + c.call_id + " outlives its parent");
    }
    if (!seen.emplace(c.call_id, &c).second) throw ValidationError("trace: duplicate call_id " + c.call_id);
  }
}

}  // namespace

Value to_json(const Trace& trace) {
  Value doc = Value::object();
  doc["version"] = kTraceFormatVersion;
  doc["trace_id"] = trace.trace_id;
  doc["created_at"] = trace.created_at;
  doc["metadata"] = trace.metadata;
  Value calls = Value::array();
  for (const auto& c : trace.calls) calls.push_back(call_to_json(c));
  doc["calls"] = std::move(calls);
  return doc;
}

Trace from_json(const Value& doc) {
  if (!doc.is_object()) throw ValidationError("trace: document must be an object");
  const Value& version = member(doc, "version");
  if (!version.is_number_integer()) throw ValidationError("trace: version must be an integer");
  if (version.get<int>() != kTraceFormatVersion) throw VersionError(version.get<int>());
  Trace t;
  t.trace_id = string_member(doc, "trace_id");
  t.created_at = string_member(doc, "created_at");
  t.metadata = member(doc, "metadata");
  const Value& calls = member(doc, "calls");
  if (!calls.is_array()) throw ValidationError("trace: calls must be an array");
  for (const auto& c : calls) {
    t.calls.push_back(call_from_json(c));
    if (!t.calls.back().parent_id) t.root_ids.push_back(t.calls.back().call_id);
  }
  check_structure(t);
  return t;
}

std::string export_trace(const Trace& trace) {
  return to_json(trace).dump(2, ' ', false, Value::error_handler_t::replace) + "\n";
}

Trace load_trace(std::string_view bytes) {
  Value doc;
  try {
    doc = Value::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed trace: ") + e.what(), e.byte);
  }
  return from_json(doc);
}

// ---------------------------------------------------------------------------
// Queries

std::vector<FunctionCount> query_functions(const Trace& trace) {
  std::vector<FunctionCount> out;
  std::unordered_map<std::string_view, std::size_t> pos;
  for (const auto& c : trace.calls) {
    auto [it, inserted] = pos.emplace(c.name, out.size());
    if (inserted) out.push_back({c.name, 0});
    ++out[it->second].count;
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.count > b.count; });
  return out;
}

std::string value_key(const Value& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

namespace {

// Numbers order numerically and before everything else; the rest orders by key.
bool value_less(const Value& a, const Value& b) {
  if (a.is_number() && b.is_number()) return a.get<double>() < b.get<double>();
  if (a.is_number() != b.is_number()) return a.is_number();
  return value_key(a) < value_key(b);
}

}  // namespace

std::vector<CallRecord> query_calls(const Trace& trace, std::string_view name,
                                    const std::optional<std::string>& sort_label,
                                    const std::optional<CallFilter>& filter) {
  std::vector<CallRecord> out;
  for (const auto& c : trace.calls) {
    if (c.name != name) continue;
    if (filter) {
      const Value* v = c.custom_value(filter->label);
      if (!v || value_key(*v) != filter->value) continue;
    }
    out.push_back(c);
  }
  if (sort_label) {
    std::stable_sort(out.begin(), out.end(), [&](const CallRecord& a, const CallRecord& b) {
      const Value* va = a.custom_value(*sort_label);
      const Value* vb = b.custom_value(*sort_label);
      if (!va || !vb) return va && !vb;
      return value_less(*va, *vb);
    });
  }
  return out;
}

}  // namespace decomp::trace
