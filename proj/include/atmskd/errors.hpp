#pragma once

#include <stdexcept>
#include <string>

namespace atmskd {

/// Base class for all errors thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor shapes do not conform (both shapes are spelled out in the message).
struct DimensionError : Error {
    using Error::Error;
};

/// A scalar argument is out of its valid range (tau <= 0, dropout rate >= 1, ...).
struct ParameterError : Error {
    using Error::Error;
};

/// Input data violates a documented precondition (e.g. target rows must sum to 1).
struct ValidationError : Error {
    using Error::Error;
};

/// Contradictory or incomplete configuration (alpha+beta != 1, unknown width
/// without an explicit override, batchnorm evaluated before any statistics exist).
struct ConfigError : Error {
    using Error::Error;
};

/// API misuse: backward() on a non-scalar, optimizer step with missing gradients.
struct UsageError : Error {
    using Error::Error;
};

/// A kernel produced NaN/Inf; the message names the offending operation.
struct NumericError : Error {
    using Error::Error;
};

/// Filesystem failures, always carrying the path involved.
struct IoError : Error {
    using Error::Error;
};

/// Teacher/student or checkpoint/architecture incompatibility.
struct ModelMismatchError : Error {
    using Error::Error;
};

/// Checkpoint parsing failures with a stable machine-readable code.
struct CheckpointError : IoError {
    enum class Code { bad_magic, version_mismatch, truncated, shape_mismatch };

    CheckpointError(Code code, const std::string& msg) : IoError(msg), code_(code) {}
    Code code() const { return code_; }

  private:
    Code code_;
};

}  // namespace atmskd
