#pragma once

#include <cstdio>
#include <string>

namespace bkd::text {

// Compact number formatting for CSV reports.
inline std::string num(double v, int digits = 10) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

}  // namespace bkd::text
