#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace resdense {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or channel counts.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A value outside the domain of an operation (negative GeM input, bad label, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered during training.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Carries every violated field, not just the first one.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations);

  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  std::vector<std::string> violations_;
};

}  // namespace resdense
