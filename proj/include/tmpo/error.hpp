#pragma once

#include <stdexcept>
#include <string>

namespace tmpo {

// Bad input, bad configuration, or a violated precondition. The CLI maps
// this to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/inf produced during training or evaluation. The CLI maps this to
// exit code 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ValidationError(message);
}

}  // namespace tmpo
