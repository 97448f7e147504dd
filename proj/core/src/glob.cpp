#include "ttc/glob.hpp"

namespace ttc {

namespace {

// Classic iterative wildcard match over `*` and `?`.
bool wildcard_match(std::string_view pat, std::string_view str) {
  std::size_t p = 0, s = 0;
  std::size_t star = std::string_view::npos, mark = 0;
  while (s < str.size()) {
    if (p < pat.size() && (pat[p] == '?' || pat[p] == str[s])) {
      ++p;
      ++s;
    } else if (p < pat.size() && pat[p] == '*') {
      star = p++;
      mark = s;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      s = ++mark;
    } else {
      return false;
    }
  }
  while (p < pat.size() && pat[p] == '*') ++p;
  return p == pat.size();
}

// Expand the first `{a,b}` group; recurses for nested/multiple groups.
void expand_braces(std::string_view pat, std::vector<std::string>& out) {
  std::size_t open = pat.find('{');
  if (open == std::string_view::npos) {
    out.emplace_back(pat);
    return;
  }
  std::size_t depth = 0;
  std::size_t close = open;
  for (std::size_t i = open; i < pat.size(); ++i) {
    if (pat[i] == '{') ++depth;
    if (pat[i] == '}' && --depth == 0) {
      close = i;
      break;
    }
  }
  if (close == open) {
    // unbalanced brace: treat literally
    out.emplace_back(pat);
    return;
  }
  std::string_view head = pat.substr(0, open);
  std::string_view body = pat.substr(open + 1, close - open - 1);
  std::string_view tail = pat.substr(close + 1);
  std::size_t start = 0, inner = 0;
  for (std::size_t i = 0; i <= body.size(); ++i) {
    if (i == body.size() || (body[i] == ',' && inner == 0)) {
      std::string alt;
      alt.append(head).append(body.substr(start, i - start)).append(tail);
      expand_braces(alt, out);
      start = i + 1;
    } else if (body[i] == '{') {
      ++inner;
    } else if (body[i] == '}') {
      --inner;
    }
  }
}

}  // namespace

bool glob_match(std::string_view pattern, std::string_view name) {
  if (pattern.find('{') == std::string_view::npos)
    return wildcard_match(pattern, name);
  std::vector<std::string> alts;
  expand_braces(pattern, alts);
  for (const auto& a : alts)
    if (wildcard_match(a, name)) return true;
  return false;
}

bool glob_match_any(const std::vector<std::string>& patterns,
                    std::string_view name) {
  for (const auto& p : patterns)
    if (glob_match(p, name)) return true;
  return false;
}

}  // namespace ttc
