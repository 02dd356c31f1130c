#pragma once

#include <stdexcept>
#include <string>

namespace roughwave {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid parameters or configuration (bad band count, tau out of range, ...).
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Band, mode or axis index outside the represented range.
class IndexError : public Error {
public:
  using Error::Error;
};

/// A fit or estimate could not be formed from the available data.
class EstimationError : public Error {
public:
  using Error::Error;
};

/// Input outside the mathematical domain of an operation.
class DomainError : public Error {
public:
  using Error::Error;
};

/// Iterative numerics failed to converge.
class NumericError : public Error {
public:
  using Error::Error;
};

/// Metric synthesis produced a non-elliptic field.
class SynthesisError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

} // namespace roughwave
