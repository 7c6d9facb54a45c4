#pragma once

#include <stdexcept>
#include <string>

namespace cpfn {

// Error taxonomy shared across the library. The CLI maps these onto its
// exit-code contract: config errors -> 2, data errors -> 3, numerical
// failures -> 4.

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidConfig : ConfigError {
  using ConfigError::ConfigError;
};

struct DimensionMismatch : NumericalError {
  using NumericalError::NumericalError;
};

struct SizeMismatch : NumericalError {
  using NumericalError::NumericalError;
};

struct NonFiniteValue : NumericalError {
  using NumericalError::NumericalError;
};

struct NonFiniteLoss : NumericalError {
  using NumericalError::NumericalError;
};

struct UnsupportedPrimitive : NumericalError {
  using NumericalError::NumericalError;
};

struct CorruptModel : DataError {
  using DataError::DataError;
};

struct ParseError : DataError {
  using DataError::DataError;
};

struct EmptyDataset : DataError {
  using DataError::DataError;
};

struct EmptyNeighborhood : NumericalError {
  using NumericalError::NumericalError;
};

struct AcceptanceStall : NumericalError {
  using NumericalError::NumericalError;
};

struct InvalidTau : NumericalError {
  using NumericalError::NumericalError;
};

struct SingularOrigin : NumericalError {
  using NumericalError::NumericalError;
};

struct BudgetExceeded : NumericalError {
  using NumericalError::NumericalError;
};

}  // namespace cpfn
