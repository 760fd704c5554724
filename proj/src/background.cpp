#include "carseg/background.hpp"

#include <algorithm>

#include "background_lists.hpp"
#include "carseg/core.hpp"

namespace carseg {

BgSet parse_bg_set(std::string_view name) {
  if (name == "none") return BgSet::None;
  if (name == "terrestrial") return BgSet::Terrestrial;
  if (name == "aquatic") return BgSet::Aquatic;
  if (name == "manmade") return BgSet::ManMade;
  if (name == "all") return BgSet::All;
  throw ConfigError("unknown background set '" + std::string(name) +
                    "' (expected none, terrestrial, aquatic, manmade or all)");
}

std::string to_string(BgSet set) {
  switch (set) {
    case BgSet::None: return "none";
    case BgSet::Terrestrial: return "terrestrial";
    case BgSet::Aquatic: return "aquatic";
    case BgSet::ManMade: return "manmade";
    case BgSet::All: return "all";
  }
  return "none";
}

const std::vector<std::string>& background_queries(BgSet set) {
  static const std::vector<std::string> none;
  static const std::vector<std::string> all = [] {
    std::vector<std::string> v = detail::k_terrestrial;
    v.insert(v.end(), detail::k_aquatic_atmospheric.begin(), detail::k_aquatic_atmospheric.end());
    v.insert(v.end(), detail::k_man_made.begin(), detail::k_man_made.end());
    return v;
  }();
  switch (set) {
    case BgSet::None: return none;
    case BgSet::Terrestrial: return detail::k_terrestrial;
    case BgSet::Aquatic: return detail::k_aquatic_atmospheric;
    case BgSet::ManMade: return detail::k_man_made;
    case BgSet::All: return all;
  }
  return none;
}

bool is_builtin_background(std::string_view text) {
  const auto& all = background_queries(BgSet::All);
  return std::find(all.begin(), all.end(), text) != all.end();
}

}  // namespace carseg
