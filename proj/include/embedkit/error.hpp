#pragma once

#include <stdexcept>
#include <string>

namespace embedkit {

// Base for all library errors. Callers that only need exit-code mapping can
// catch this; everything else is a subclass carrying the failure kind.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes disagree with an operation's requirements.
class DimensionError : public Error {
public:
    using Error::Error;
};

// An input that must be non-empty (text, rows, mask) was empty.
class EmptyInputError : public Error {
public:
    using Error::Error;
};

// A documented precondition of an operation was violated.
class ContractError : public Error {
public:
    using Error::Error;
};

// Numerically degenerate input (zero vector, constant gold scores).
class DegenerateInputError : public Error {
public:
    using Error::Error;
};

// A line of an input file could not be parsed.
class ParseError : public Error {
public:
    using Error::Error;
};

// A parsed record is missing required fields or violates field invariants.
class SchemaError : public Error {
public:
    using Error::Error;
};

// Invalid or inconsistent configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Corrupt or truncated binary artifact (checkpoints).
class FormatError : public Error {
public:
    using Error::Error;
};

// Filesystem failure (missing or unwritable file).
class IoError : public Error {
public:
    using Error::Error;
};

// Inputs that must agree (checkpoint parameter sets, doc-id sets) do not.
class IncompatibilityError : public Error {
public:
    using Error::Error;
};

// A gradient was requested for a parameter never registered on the tape.
class UnknownParameterError : public Error {
public:
    using Error::Error;
};

// Training aborted (non-finite loss); message carries step and batch ids.
class TrainingAbort : public Error {
public:
    using Error::Error;
};

}  // namespace embedkit
