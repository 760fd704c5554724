// background.hpp
//
// Built-in background-query lists. Extra texts describing common scene
// context are added to the softmax during mask proposal so that activation
// on regions nobody asked about is suppressed.

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace carseg {

enum class BgSet { None, Terrestrial, Aquatic, ManMade, All };

/// Parses none|terrestrial|aquatic|manmade|all. Throws ConfigError.
BgSet parse_bg_set(std::string_view name);
std::string to_string(BgSet set);

/// The texts of a built-in set, in file order. All = the three concatenated.
const std::vector<std::string>& background_queries(BgSet set);

/// True if text appears in any built-in list.
bool is_builtin_background(std::string_view text);

}  // namespace carseg
