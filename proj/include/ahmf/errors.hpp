#pragma once

#include <stdexcept>
#include <string>

namespace ahmf {

// Error taxonomy mirrored by CLI exit codes: config -> 2, data -> 3, numeric -> 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller misuse of a library contract (shape mismatch, wrong mode, unnormalized map).
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : UsageError {
    explicit DimensionError(const std::string& msg) : UsageError(msg) {}
};

}  // namespace ahmf
