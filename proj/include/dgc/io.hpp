#pragma once

#include <string>
#include <vector>

namespace dgc {

// Shortest round-trip decimal form.
std::string format_double(double v);

// Writes through a temporary sibling file then renames.
void write_text_file(const std::string& path, const std::string& content);

std::string join_csv(const std::vector<std::string>& cells);

}  // namespace dgc
