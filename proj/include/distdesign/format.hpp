#pragma once

#include <cstdio>
#include <string>

namespace distdesign {

// 17 significant digits: exact round trip for IEEE-754 doubles.
inline std::string format_double(double v) {
  char buf[40];
  int len = std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf, static_cast<std::size_t>(len));
}

}  // namespace distdesign
