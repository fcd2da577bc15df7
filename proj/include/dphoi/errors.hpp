#pragma once

#include <stdexcept>
#include <string>

namespace dphoi {

// Base of every error the library throws. The CLI maps DataError to exit
// code 1 (CheckpointError too, a bad file is bad input) and everything else
// to 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data (manifests, captions, targets).
class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

// A loss or intermediate value became NaN/Inf.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Operation invoked on state it does not accept (e.g. verb head on detection
// decoder output).
class StateError : public Error {
 public:
  using Error::Error;
};

// interaction_decode was handed zero person queries; callers skip the sample.
class EmptyRpqError : public Error {
 public:
  using Error::Error;
};

}  // namespace dphoi
