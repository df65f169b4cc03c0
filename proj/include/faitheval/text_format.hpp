#pragma once

#include <string>
#include <vector>

namespace faitheval {

// Shortest decimal string that round-trips to the same double. Used for
// every numeric cell so report files are byte-stable across runs and
// worker counts.
std::string format_double(double value);

std::vector<std::string> split(const std::string& text, char sep);

// Parses "a,b,c" into doubles; throws ParameterError on junk.
std::vector<double> parse_double_list(const std::string& text);

std::string trim(const std::string& text);

}  // namespace faitheval
