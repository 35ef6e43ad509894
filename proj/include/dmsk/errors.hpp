#pragma once

#include <stdexcept>
#include <string>

namespace dmsk {

// Exit-code contract: 0 success, 2 usage, 3 data, 4 checkpoint.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : DataError {
    explicit DimensionError(const std::string& msg) : DataError(msg) {}
};

struct NumericError : DataError {
    explicit NumericError(const std::string& msg) : DataError(msg) {}
};

struct ParameterError : DataError {
    explicit ParameterError(const std::string& msg) : DataError(msg) {}
};

// Thrown by backward() when the loss is detached or the tape was already consumed.
struct TapeError : std::runtime_error {
    explicit TapeError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dmsk
