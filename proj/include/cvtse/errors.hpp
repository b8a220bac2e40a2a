#pragma once

#include <stdexcept>
#include <string>

namespace cvtse {

/// Ill-formed or unreadable configuration (network file, scenario file, flags).
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Data file could not be parsed. Carries the file and 1-based line.
class IngestError : public std::runtime_error {
public:
  IngestError(std::string file, long line, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(line) + ": " + what),
        file_(std::move(file)),
        line_(line) {}

  const std::string& file() const noexcept { return file_; }
  long line() const noexcept { return line_; }

private:
  std::string file_;
  long line_;
};

/// Numerical failure inside the filter recursion at a given step.
class FilterError : public std::runtime_error {
public:
  FilterError(long step, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + ": " + what), step_(step) {}

  long step() const noexcept { return step_; }

private:
  long step_;
};

/// Raised only in strict mode when the discretization condition is violated.
class CflError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

}  // namespace cvtse
