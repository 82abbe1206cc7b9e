#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ehrgan {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor extents or dimensions do not fit the operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A value or configuration violates a documented precondition.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// NaN or Inf reached a loss, gradient, or parameter.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Malformed input file. Carries the 1-based line number when known (0 otherwise).
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// An artifact was produced by a different pipeline, format version, or vocabulary.
class VersionMismatch : public Error {
public:
    using Error::Error;
};

}  // namespace ehrgan
