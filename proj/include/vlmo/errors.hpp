#pragma once

#include <stdexcept>

namespace vlmo {

// Bad command-line usage (exit code 2).
class UsageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration (exit code 3).
class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Corrupt, truncated or inconsistent files and corpora (exit code 4).
class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// A verification run found a failure (exit code 5).
class CheckFailure : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

}  // namespace vlmo
