#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace triphase {

/// Invalid user configuration. The CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A record in an input file could not be parsed.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Records parsed but disagree with the dataset's shape (e.g. label depth).
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training diverged or hit an unrecoverable state.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace triphase
