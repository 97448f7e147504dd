#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace ttc {

/// Match a dotted parameter name against a glob pattern.
///
/// `*` matches any run of characters (including `.` and the empty run),
/// `?` matches one character, and `{a,b,c}` matches any listed alternative.
/// Example: `*.norm*.{gamma,beta}` matches `layers.3.norm2.gamma` and
/// `final.norm.beta`.
bool glob_match(std::string_view pattern, std::string_view name);

/// True if any pattern in the list matches.
bool glob_match_any(const std::vector<std::string>& patterns,
                    std::string_view name);

}  // namespace ttc
