#pragma once

#include <string>
#include <string_view>

#include "decomp/errors.hpp"
#include "decomp/recipes.hpp"

namespace decomp::recipes::detail {

struct LmCall {
  lm::CompletionResponse response;
  std::optional<trace::CallId> id;
};

// One traced completion request.
LmCall call_lm(const RunContext& ctx, std::string name, const prompts::Rendered& prompt, std::string route,
               int max_tokens);

std::string trim(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

template <class F>
auto guarded(trace::Scope& scope, F&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    scope.fail({error_kind(e), e.what()});
    throw;
  }
}

}  // namespace decomp::recipes::detail
