#pragma once

#include <stdexcept>
#include <string>

namespace lcnn {

/// Base exception for every failure raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a file cannot be read, decoded or written.
class IoError : public Error {
public:
    using Error::Error;
};

/// Raised when a cache or model file carries the wrong magic or version.
class FormatError : public IoError {
public:
    using IoError::IoError;
};

} // namespace lcnn
