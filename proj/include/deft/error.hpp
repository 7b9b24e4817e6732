#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace deft {

// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: malformed files, violated preconditions, invalid options.
// The CLI maps this to exit status 1.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// Training hit a non-finite loss or gradient.
class TrainingAborted : public Error {
 public:
  TrainingAborted(std::size_t step, const std::string& what)
      : Error("training aborted at step " + std::to_string(step) + ": " + what),
        step_(step) {}

  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace deft
