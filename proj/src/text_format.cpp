#include "faitheval/text_format.hpp"

#include <cstdio>
#include <cstdlib>
#include <stdexcept>

#include "faitheval/error.hpp"

namespace faitheval {

std::string format_double(double value) {
  char buf[40];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof(buf), "%.*g", precision, value);
    if (std::strtod(buf, nullptr) == value) {
      break;
    }
  }
  return buf;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = text.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(text.substr(start));
      return out;
    }
    out.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string trim(const std::string& text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = text.find_last_not_of(" \t\r\n");
  return text.substr(first, last - first + 1);
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& piece : split(text, ',')) {
    const std::string item = trim(piece);
    if (item.empty()) {
      throw ParameterError("empty entry in numeric list: '" + text + "'");
    }
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    if (end == nullptr || *end != '\0') {
      throw ParameterError("cannot parse number '" + item + "'");
    }
    out.push_back(v);
  }
  return out;
}

}  // namespace faitheval
