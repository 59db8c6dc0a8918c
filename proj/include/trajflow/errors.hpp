#pragma once

#include <stdexcept>
#include <string>

namespace trajflow {

/// Shape or dimension mismatch between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A precondition of an API contract was violated (wrong state, bad argument).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// NaN or Inf appeared where only finite values are allowed.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Reading or writing a file failed, or the file content is malformed.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// ODE integration could not reach its target (step budget exhausted).
class IntegrationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid run configuration. `key` names the offending config path.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& what)
        : std::runtime_error(key + ": " + what), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

}  // namespace trajflow
