#pragma once

#include <stdexcept>
#include <string>

namespace afp {

// Bad argument or shape passed to a library operation.
class InvalidInput : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed or truncated file.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Inconsistent configuration (e.g. early stopping without a validation set).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Artifact missing or hash mismatch.
class IntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace afp
