#pragma once

#include <stdexcept>
#include <string>

namespace vstain {

/// Invalid configuration value or schema violation (exit code 2 at the CLI).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Caller broke an API precondition (shape mismatch, bad range, empty batch).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite value where a finite one is required; aborts the current item.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad input data on disk (unreadable corpus, mixed shapes, missing files).
struct IngestionError : std::runtime_error {
    explicit IngestionError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace vstain
