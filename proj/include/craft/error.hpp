// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace craft {

// Base class for all errors raised by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible tensor/grid shapes.
struct DimensionError : Error {
    using Error::Error;
};

// NaN/Inf produced where a finite value is required.
struct NumericError : Error {
    using Error::Error;
};

// API contract violated (e.g. backward on a non-scalar).
struct ContractError : Error {
    using Error::Error;
};

// Bad argument value (empty string, out-of-range index, ...).
struct ArgumentError : Error {
    using Error::Error;
};

// Malformed file: bad magic, version mismatch, truncation, CRC failure.
struct FormatError : Error {
    using Error::Error;
};

// Artifact provenance mismatch: codebook CRC recorded in a checkpoint does
// not match the codebook actually supplied.
struct CrcMismatchError : Error {
    using Error::Error;
};

// Filesystem-level failure.
struct IoError : Error {
    using Error::Error;
};

// Invalid run configuration.
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace craft
