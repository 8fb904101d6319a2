#ifndef SYMBOLKIT_ERROR_HPP
#define SYMBOLKIT_ERROR_HPP

#include <stdexcept>
#include <string>

namespace symbolkit {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or corrupted on-disk data (bundles, model files, tables).
class FormatError : public Error {
public:
    using Error::Error;
};

/// A model file written by an incompatible format version.
class VersionError : public FormatError {
public:
    using FormatError::FormatError;
};

/// Arguments that violate an operation's preconditions.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

} // namespace symbolkit

#endif
