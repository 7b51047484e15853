#pragma once

#include <stdexcept>
#include <string>

namespace devgest {

/// Error taxonomy mirrored by the CLI exit codes: usage errors are handled by
/// the argument parser (exit 2), ConfigError maps to 3, FileError to 4.
struct Error : std::runtime_error {
  explicit Error(const std::string& m) : std::runtime_error(m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(m) {}
};

struct FileError : Error {
  explicit FileError(const std::string& m) : Error(m) {}
};

}  // namespace devgest
