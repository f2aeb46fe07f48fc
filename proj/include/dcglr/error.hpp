#pragma once

#include <stdexcept>
#include <string>

namespace dcglr {

// Shape/axis disagreements between operands.
struct DimensionError : std::invalid_argument {
    explicit DimensionError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Out-of-range scalar arguments (temperatures, counts, ratios).
struct ParameterError : std::invalid_argument {
    explicit ParameterError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Malformed input files; carries a human-readable location.
struct ParseError : std::runtime_error {
    ParseError(const std::string& msg, int line)
        : std::runtime_error(msg + " (line " + std::to_string(line) + ")"), line_number(line) {}
    int line_number;
};

// Bad or inconsistent data at run time (missing files, degenerate crops, label trouble).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf detected where finite values are required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dcglr
