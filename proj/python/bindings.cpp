#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "decomp/app.hpp"
#include "decomp/corpus.hpp"
#include "decomp/errors.hpp"
#include "decomp/eval.hpp"
#include "decomp/lm.hpp"
#include "decomp/recipes.hpp"
#include "decomp/trace.hpp"

namespace py = pybind11;
using namespace decomp;

PYBIND11_MODULE(_core, m) {
  m.doc() = "decomp core bindings";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);

  m.def("inverse_perplexity", [](const std::vector<double>& logprobs) { return lm::inverse_perplexity(logprobs); },
        py::arg("token_logprobs"));

  m.def("fisher_exact_two_sided",
        [](std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
          return eval::fisher_exact_two_sided({a, b, c, d});
        },
        py::arg("a"), py::arg("b"), py::arg("c"), py::arg("d"));

  m.def("token_f1", &eval::token_f1, py::arg("prediction"), py::arg("gold_answers"));
  m.def("normalize_answer", &eval::normalize_answer, py::arg("text"));

  // Paper JSON text in, (verdict, description or None) out.
  m.def("keyword_decision_tree", [](const std::string& paper_json) {
    auto paper = corpus::ingest_paper(paper_json, corpus::Format::json);
    auto d = recipes::keyword_decision_tree(paper);
    return py::make_tuple(std::string(corpus::to_string(d.verdict)), d.description);
  }, py::arg("paper_json"));

  // Trace JSON text in, [(name, count)] out.
  m.def("query_functions", [](const std::string& trace_json) {
    std::vector<std::pair<std::string, std::size_t>> out;
    for (const auto& f : trace::query_functions(trace::load_trace(trace_json))) out.emplace_back(f.name, f.count);
    return out;
  }, py::arg("trace_json"));

  m.def("recipe_names", &app::recipe_names);

  m.def("run_cli", [](std::vector<std::string> args) {
    args.insert(args.begin(), "decomp");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    py::gil_scoped_release release;
    return app::run_cli(static_cast<int>(argv.size()), argv.data());
  }, py::arg("args"));
}
