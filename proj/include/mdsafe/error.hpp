#pragma once

#include <stdexcept>
#include <string>

namespace mdsafe {

/// Base of every error raised by the toolkit. The CLI maps subclasses to
/// exit codes (see exit_code()).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed container (bad NPY header, unreadable PNG, broken CSV).
class FormatError : public Error {
public:
    using Error::Error;
};

/// Well-formed data that does not match the expected schema or registry.
class SchemaError : public Error {
public:
    using Error::Error;
};

/// Data that parses but violates a value invariant (simplex sums).
class ValidationError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Stored content does not match its recorded hash, or is truncated.
class IntegrityError : public Error {
public:
    using Error::Error;
};

class EmptyDatasetError : public Error {
public:
    using Error::Error;
};

/// A numerical invariant broke (e.g. a negative quadratic form).
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Bad user configuration (flags, requirement bounds, spec files).
class ConfigError : public Error {
public:
    using Error::Error;
};

// 0 success, 1 validation error, 2 data error, 3 internal numerical error.
inline int exit_code(const std::exception& e) noexcept {
    if (dynamic_cast<const NumericalError*>(&e) != nullptr) return 3;
    if (dynamic_cast<const ConfigError*>(&e) != nullptr) return 1;
    if (dynamic_cast<const Error*>(&e) != nullptr) return 2;
    return 3;
}

}  // namespace mdsafe
