#pragma once

#include <stdexcept>
#include <string>

namespace stag {

// Invalid input or configuration supplied by the caller. CLI maps this to exit code 1.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Failure while carrying out an otherwise valid request (I/O, network, numeric
// blow-up). CLI maps this to exit code 2.
struct RuntimeFailure : std::runtime_error {
  explicit RuntimeFailure(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace stag
