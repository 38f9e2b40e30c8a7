#pragma once

#include <stdexcept>
#include <string>

namespace hseg {

// Failures caused by input data (files, corpora, degenerate images).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training or inference produced non-finite values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid command-line or configuration input.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hseg
