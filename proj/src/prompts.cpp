#include "decomp/prompts.hpp"

#include <fstream>
#include <sstream>

#include "decomp/errors.hpp"

namespace decomp::prompts {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

Template::Template(std::string source) : source_(std::move(source)) {
  std::size_t pos = 0;
  while (pos < source_.size()) {
    const auto open = source_.find("{{", pos);
    if (open == std::string::npos) break;
    const auto close = source_.find("}}", open + 2);
    if (close == std::string::npos) break;
    if (open > pos) pieces_.push_back({false, source_.substr(pos, open - pos)});
    pieces_.push_back({true, trim(std::string_view(source_).substr(open + 2, close - open - 2))});
    pos = close + 2;
  }
  if (pos < source_.size()) pieces_.push_back({false, source_.substr(pos)});
}

Rendered Template::render(const Slots& slots) const {
  Rendered out;
  for (const auto& p : pieces_) {
    if (!p.is_slot) {
      out.text += p.text;
      out.structure.literal(p.text);
      continue;
    }
    auto it = slots.find(p.text);
    if (it == slots.end()) throw ValidationError("prompt template: no value for slot '" + p.text + "'");
    out.text += it->second;
    out.structure.interpolated(it->second, p.text);
  }
  return out;
}

bool Template::has_slot(std::string_view name) const {
  for (const auto& p : pieces_) {
    if (p.is_slot && p.text == name) return true;
  }
  return false;
}

const PromptLibrary& PromptLibrary::builtin() {
  static const PromptLibrary lib = [] {
    PromptLibrary l;
    for (const auto& [name, text] : detail::builtin_prompt_texts()) l.set(name, text);
    return l;
  }();
  return lib;
}

PromptLibrary PromptLibrary::from_directory(const std::filesystem::path& dir) {
  PromptLibrary lib = builtin();
  if (!std::filesystem::is_directory(dir)) {
    throw ValidationError("prompt asset directory not found: " + dir.string());
  }
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".txt") continue;
    std::ifstream in(entry.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    lib.set(entry.path().stem().string(), ss.str());
  }
  return lib;
}

const Template& PromptLibrary::get(std::string_view name) const {
  auto it = templates_.find(name);
  if (it == templates_.end()) throw ValidationError("unknown prompt template '" + std::string(name) + "'");
  return it->second;
}

bool PromptLibrary::contains(std::string_view name) const { return templates_.find(name) != templates_.end(); }

std::vector<std::string> PromptLibrary::names() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : templates_) out.push_back(k);
  return out;
}

void PromptLibrary::set(std::string name, std::string source) {
  // Asset files conventionally end with a newline that is not part of the prompt.
  if (!source.empty() && source.back() == '\n') source.pop_back();
  templates_.insert_or_assign(std::move(name), Template(std::move(source)));
}

Rendered concat(Rendered a, const Rendered& b) {
  a.text += b.text;
  for (const auto& s : b.structure.segments()) {
    if (s.kind == trace::Segment::Kind::literal) {
      a.structure.literal(s.text);
    } else {
      a.structure.interpolated(s.text, s.expr);
    }
  }
  return a;
}

Rendered literal(std::string text) {
  Rendered r;
  r.structure.literal(text);
  r.text = std::move(text);
  return r;
}

}  // namespace decomp::prompts
