#pragma once

#include <stdexcept>
#include <string>

namespace kd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Errors caused by bad input from the user (bad flags, configs, files).
// The CLI maps these to exit code 1.
class UsageError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public UsageError {
 public:
  using UsageError::UsageError;
};

class TokenizerError : public UsageError {
 public:
  using UsageError::UsageError;
};

class FileNotFoundError : public UsageError {
 public:
  using UsageError::UsageError;
};

// Numerical / shape errors.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class DegenerateRowError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

// Checkpoint loading.
class FormatError : public Error {
 public:
  using Error::Error;
};

class TruncationError : public Error {
 public:
  using Error::Error;
};

class ShapeMismatchError : public Error {
 public:
  using Error::Error;
};

// Losses.
class EmptyLossError : public Error {
 public:
  using Error::Error;
};

class MappingError : public Error {
 public:
  using Error::Error;
};

// Data pipeline.
class EncodingError : public Error {
 public:
  using Error::Error;
};

class PackingError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

// Evaluation.
class ComparabilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace kd
