#pragma once

#include <stdexcept>
#include <string>

namespace flowrl {

// Error taxonomy used across the library. Exit codes in the CLI map
// DataError -> 2 and ResumeError -> 3; everything else is a plain failure.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ResumeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace flowrl
