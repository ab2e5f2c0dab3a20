#pragma once

#include <stdexcept>
#include <string>

namespace mtslm {

// Precondition violations (shapes, ranges, bad parameters) surface as
// std::invalid_argument. The types below cover the cases callers need to
// tell apart.

/// A numeric value that must be finite was not.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint or data file is malformed, truncated, or of the wrong version.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint payload does not match its recorded checksum (includes
/// truncated files).
class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Checkpoint written by an incompatible format version.
class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Training produced a non-finite validation loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Configuration document does not match the expected schema.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A required input file or directory does not exist.
class MissingInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mtslm
