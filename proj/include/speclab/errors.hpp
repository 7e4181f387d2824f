#pragma once

#include <stdexcept>
#include <string>

namespace speclab {

// Base error; subclasses map onto CLI exit codes (see tools/main.cpp).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid configuration or parameter value (exit 2).
struct ConfigError : Error {
    using Error::Error;
};

// Missing prerequisite artifact, e.g. draft training without target weights (exit 3).
struct DependencyError : Error {
    using Error::Error;
};

// Bad input data or file format (exit 4).
struct DataError : Error {
    using Error::Error;
};

// Numeric or API contract violation: shape mismatch, NaN, cache divergence (exit 5).
struct ContractError : Error {
    using Error::Error;
};

}  // namespace speclab
