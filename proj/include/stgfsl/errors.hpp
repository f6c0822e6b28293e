#pragma once

#include <stdexcept>
#include <string>

namespace stgfsl {

// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A required file is missing or unreadable.
class LoadError : public Error {
 public:
  using Error::Error;
};

// Loaded or constructed data violates a type invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Shapes or arguments do not satisfy an operation's contract.
class ContractError : public Error {
 public:
  using Error::Error;
};

// A numeric parameter is out of its admissible range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

class DegenerateStatsError : public Error {
 public:
  using Error::Error;
};

class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

class DegenerateNeighborhoodError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Loss became non-finite or exceeded the divergence bound.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long episode)
      : Error(what + " (episode " + std::to_string(episode) + ")"), episode_(episode) {}

  long episode() const noexcept { return episode_; }

 private:
  long episode_;
};

}  // namespace stgfsl
