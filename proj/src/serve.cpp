#include <algorithm>
#include <map>
#include <mutex>

#include "decomp/app.hpp"
#include "decomp/errors.hpp"
#include "httplib.h"

namespace decomp::app {

namespace {

constexpr const char* kPlaceholder =
    "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>decomp traces</title></head>\n"
    "<body><h1>decomp trace server</h1><p>Trace index: <a href=\"/api/traces\">/api/traces</a></p></body></html>\n";

void not_found(httplib::Response& res) {
  res.status = 404;
  res.set_content(R"({"error":"not_found"})", "application/json");
}

}  // namespace

std::vector<TraceIndexEntry> index_traces(const fs::path& dir) {
  std::vector<TraceIndexEntry> out;
  if (!fs::is_directory(dir)) throw UsageError("trace directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    trace::Trace t;
    try {
      t = trace::load_trace(corpus::read_file(f));
    } catch (const Error&) {
      continue;
    }
    TraceIndexEntry e;
    e.id = t.trace_id;
    e.recipe = t.metadata.value("recipe", "");
    e.paper_id = t.metadata.value("paper_id", "");
    e.call_count = t.calls.size();
    e.created_at = t.created_at;
    e.path = f;
    out.push_back(std::move(e));
  }
  return out;
}

void configure_server(httplib::Server& server, const fs::path& traces_dir, const std::optional<fs::path>& static_dir) {
  auto entries = std::make_shared<std::vector<TraceIndexEntry>>(index_traces(traces_dir));

  server.Get("/api/traces", [entries](const httplib::Request&, httplib::Response& res) {
    Value list = Value::array();
    for (const auto& e : *entries) {
      list.push_back({{"id", e.id},
                      {"recipe", e.recipe},
                      {"paper_id", e.paper_id},
                      {"call_count", e.call_count},
                      {"created_at", e.created_at}});
    }
    res.set_content(list.dump(), "application/json");
  });

  server.Get(R"(/api/traces/([^/]+))", [entries](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    auto it = std::find_if(entries->begin(), entries->end(), [&](const TraceIndexEntry& e) { return e.id == id; });
    if (it == entries->end()) return not_found(res);
    try {
      res.set_content(corpus::read_file(it->path), "application/json");
    } catch (const Error&) {
      not_found(res);
    }
  });

  if (static_dir) {
    if (!server.set_mount_point("/", static_dir->string())) {
      throw UsageError("static directory not found: " + static_dir->string());
    }
  } else {
    server.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_content(kPlaceholder, "text/html"); });
  }

  server.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });

  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.status == 404) not_found(res);
  });

  server.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
  });
}

}  // namespace decomp::app
