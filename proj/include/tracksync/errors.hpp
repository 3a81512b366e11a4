#pragma once

#include <stdexcept>
#include <string>

namespace tracksync {

// Bad arguments or data violating a documented precondition.
class InvalidInput : public std::runtime_error {
public:
  explicit InvalidInput(const std::string& msg) : std::runtime_error(msg) {}
};

// Query outside a valid domain (e.g. resampling past the track span).
class OutOfRange : public std::runtime_error {
public:
  explicit OutOfRange(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed files or configs. CLI maps this to exit code 2.
class SchemaError : public std::runtime_error {
public:
  explicit SchemaError(const std::string& msg) : std::runtime_error(msg) {}
};

// Runtime numerical failure. CLI maps this to exit code 3.
class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace tracksync
