#pragma once

#include <stdexcept>
#include <string>

namespace maxrm {

/// Invalid user input: malformed config, bad CLI arguments, schema violations.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Problems with dataset content: parse failures, dimension mismatches,
/// empty/degenerate environments.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure inside an optimizer or matrix factorization.
struct SolverError : std::runtime_error {
    explicit SolverError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace maxrm
