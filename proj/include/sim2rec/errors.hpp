#pragma once

#include <stdexcept>
#include <string>

namespace sim2rec {

// Invalid configuration or shape mismatch detected before any work is done.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. backward() on a graph that recorded nothing.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A NaN/Inf showed up in a value, loss or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A pipeline stage failed; carries the stage-local context in the message.
class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sim2rec
