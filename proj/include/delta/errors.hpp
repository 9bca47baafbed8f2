#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace delta {

/// Incompatible tensor shapes passed to an operation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Invalid configuration (layer chain, hyperparameters, schedule, crop sizes).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A caller broke an API precondition (backward on a non-scalar, missing snapshot...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Out-of-range class label, filter index or table lookup.
class IndexError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// NaN or Inf produced where only finite values are allowed.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Content that parsed but is inconsistent (label/class mismatch, dataset hash mismatch).
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed binary container. `offset()` is the byte position where reading failed.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

}  // namespace delta
