#pragma once

#include <stdexcept>
#include <string>

namespace dql {

// Invalid hyperparameters or structural configuration (odd embedding dim,
// rho outside [0,1], N = 0, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A NaN/Inf showed up in a forward or backward pass. `step` is the diffusion
// step index when the failure happened inside a reverse chain, -1 otherwise.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::string component, int step, const std::string& what)
      : std::runtime_error(what), component_(std::move(component)), step_(step) {}

  const std::string& component() const noexcept { return component_; }
  int step() const noexcept { return step_; }

 private:
  std::string component_;
  int step_;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dql
