#pragma once

#include <stdexcept>
#include <string>

namespace smelab {

// Dimension mismatch or wrong rank.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Class id, token id or row index out of range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Invalid hyperparameter or configuration value.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An operation was called on inputs that violate its precondition,
// e.g. editing an example the model already predicts correctly.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Input is numerically degenerate (zero-norm query and similar).
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Malformed or incompatible file on disk.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VersionMismatch : public FormatError {
 public:
  using FormatError::FormatError;
};

// A stage's input file or directory does not exist.
class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A stage was handed artifacts produced under a different configuration.
class ConfigMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace smelab
