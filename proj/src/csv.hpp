#pragma once

// Minimal RFC 4180 reader/writer helpers shared by the import/export paths.

#include <string>
#include <string_view>
#include <vector>

namespace pvst::csv {

std::vector<std::vector<std::string>> parse(std::string_view text);
std::string escape(std::string_view field);
std::string join(const std::vector<std::string>& fields);

}  // namespace pvst::csv
