#pragma once

#include <charconv>
#include <string>
#include <system_error>

#include "steerkit/errors.hpp"

namespace steerkit {

// Shortest round-trip decimal representation; keeps emitted CSV/JSON
// byte-stable across runs.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  if (res.ec != std::errc()) throw NumericError("failed to format double");
  return std::string(buf, res.ptr);
}

inline std::string format_float(float v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  if (res.ec != std::errc()) throw NumericError("failed to format float");
  return std::string(buf, res.ptr);
}

}  // namespace steerkit
