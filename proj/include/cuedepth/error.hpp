#pragma once

#include <stdexcept>
#include <string>

namespace cuedepth {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor shapes or extents do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// A value is outside the mathematical domain of an operation (log of a
/// non-positive number, non-positive ground-truth depth, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// An API contract was violated (backward on a non-scalar, bad kernel size).
class ContractError : public Error {
public:
    using Error::Error;
};

/// NaN or Inf encountered where finite values are required.
class NumericFault : public Error {
public:
    using Error::Error;
};

/// An input is degenerate (empty mask, zero evaluated pixels).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

/// Text or binary input could not be parsed.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Parsed fine but has the wrong structure (vector dimensionality, magic bytes).
class FormatError : public Error {
public:
    using Error::Error;
};

/// A configuration violates its invariants.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Scene generation could not satisfy its constraints.
class GenerationError : public Error {
public:
    using Error::Error;
};

/// File I/O failed; the message names the path.
class PersistenceError : public Error {
public:
    using Error::Error;
};

/// A key (class name, instance id) is absent from a table or map.
class LookupError : public Error {
public:
    using Error::Error;
};

/// Cross-input consistency check failed (ingest rasters, descriptors).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// A multi-seed run finished with one or more failed seeds.
class RunError : public Error {
public:
    using Error::Error;
};

} // namespace cuedepth
