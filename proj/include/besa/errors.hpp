// Copyright 2026 The besa authors
// Licensed under the Apache License, Version 2.0

#ifndef BESA_ERRORS_HPP
#define BESA_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace besa {

// Exit-code mapping used by the CLI: usage/config -> 1, data -> 2,
// training divergence -> 3.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dimension or shape disagreement between operands.
class ShapeError : public Error {
public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// API misuse: backward without a recorded forward, out-of-range index, etc.
class UsageError : public Error {
public:
  explicit UsageError(const std::string& msg) : Error(msg) {}
};

/// Bad input data: out-of-range token id, corrupt checkpoint, truncated file.
class DataError : public Error {
public:
  explicit DataError(const std::string& msg) : Error(msg) {}
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

/// Invalid configuration value or unknown config key.
class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Optimization diverged; carries the last finite loss observed.
class TrainingError : public Error {
public:
  TrainingError(const std::string& msg, double last_finite_loss, int step)
      : Error(msg), last_finite_loss(last_finite_loss), step(step) {}
  double last_finite_loss;
  int step;
};

}  // namespace besa

#endif  // BESA_ERRORS_HPP
