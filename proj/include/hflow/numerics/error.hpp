#pragma once

#include <stdexcept>
#include <string>

namespace hflow {

// Raised when a caller violates an operation's preconditions (shapes, ranges,
// configuration). The message names the offending values.
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Raised when a computation produces non-finite values or diverges.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace hflow
