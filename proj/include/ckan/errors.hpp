#pragma once

#include <stdexcept>
#include <string>

namespace ckan {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or axis disagreement between tensors/operations.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid static configuration (model/train/system parameters).
struct ConfigError : Error {
    using Error::Error;
};

// File and format problems. The three subclasses are kept distinct so
// callers can tell a bad file apart from a short one or a stale one.
struct DataError : Error {
    using Error::Error;
};

struct MalformedHeaderError : DataError {
    using DataError::DataError;
};

struct TruncatedPayloadError : DataError {
    using DataError::DataError;
};

struct VersionMismatchError : DataError {
    using DataError::DataError;
};

// Runtime numeric failure (divergence, undefined normalization).
struct NumericError : Error {
    using Error::Error;
};

}  // namespace ckan
