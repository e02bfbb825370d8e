#pragma once

#include <stdexcept>
#include <string>

namespace snaplab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation (e.g. t > 1).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Operation would divide by a vanishing alpha/sigma or an equal-SNR gap.
class SingularityError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A tensor or scalar became NaN/Inf. The message identifies where.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// Training loss exceeded the divergence guard.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration. `field()` is the dotted path of the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace snaplab
