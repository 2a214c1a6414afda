#pragma once

#include <stdexcept>
#include <string>

namespace featinv {

// Bad user input: malformed config, unresolvable paths, unknown options.
// The CLI maps this to exit status 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A run that started but could not finish (non-finite loss, divergent
// training, I/O failure on an artifact). The CLI maps this to exit status 1.
class RunError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace featinv
