#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cdlab {

// Writes to a sibling temp file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

std::vector<std::string> split_tabs(std::string_view line);
std::vector<std::string> split_lines(std::string_view text);

// Shortest decimal form that round-trips to the same double.
std::string format_double(double v);

}  // namespace cdlab
