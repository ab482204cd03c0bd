#pragma once

#include <stdexcept>
#include <string>

namespace freqhead {

/// Raised for every contract violation detected at runtime (bad shapes,
/// malformed files, empty inputs). The message is meant for the operator.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when training produces a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(long step, const std::string& what)
      : Error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace freqhead
