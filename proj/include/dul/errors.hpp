#pragma once

#include <stdexcept>
#include <string>

namespace dul {

/// Raised when a caller breaks a documented precondition (shape mismatch,
/// non-positive sigma, label out of range, ...).
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Training produced a non-finite loss.
class NumericalAbort : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MissingInput : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ContractError(what);
}

}  // namespace detail
}  // namespace dul
