#pragma once

#include <stdexcept>
#include <string>

namespace spf {

/// Invalid configuration value, unknown config key, or out-of-table enum.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Caller passed an argument outside an operation's precondition.
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Object used before it was ready (weights not loaded, digest mismatch).
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace spf
