#pragma once

#include <stdexcept>
#include <string>

namespace tta {

// Invalid or inconsistent user-facing configuration (CLI exit code 1).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Numeric failure at run time, e.g. training divergence (CLI exit code 2).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// File that cannot be read, written, or parsed (CLI exit code 2).
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace tta
