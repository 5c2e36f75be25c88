#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "decomp/trace.hpp"

namespace decomp::prompts {

using Slots = std::map<std::string, std::string, std::less<>>;

// A prompt and the segment structure it was rendered from.
struct Rendered {
  std::string text;
  trace::PromptTemplate structure;
};

// Text with {{slot}} placeholders. Parsing never fails; rendering throws
// ValidationError when a placeholder has no value.
class Template {
 public:
  Template() = default;
  explicit Template(std::string source);

  Rendered render(const Slots& slots) const;
  bool has_slot(std::string_view name) const;
  const std::string& source() const { return source_; }

 private:
  struct Piece {
    bool is_slot = false;
    std::string text;  // literal text or slot name
  };

  std::string source_;
  std::vector<Piece> pieces_;
};

// Named set of templates. Starts from the built-in assets; a directory can
// override individual entries by file name (`<name>.txt`).
class PromptLibrary {
 public:
  static const PromptLibrary& builtin();
  static PromptLibrary from_directory(const std::filesystem::path& dir);

  const Template& get(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::vector<std::string> names() const;

  void set(std::string name, std::string source);

 private:
  std::map<std::string, Template, std::less<>> templates_;
};

// Concatenates two rendered prompts, keeping the segment structure.
Rendered concat(Rendered a, const Rendered& b);
Rendered literal(std::string text);

namespace detail {
const std::vector<std::pair<std::string, std::string>>& builtin_prompt_texts();
const std::string& builtin_keyword_patterns();
}  // namespace detail

}  // namespace decomp::prompts
