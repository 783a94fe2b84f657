#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace cnet {

// Shape or size mismatch between tensors, layers, or constraint specs.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: backward without a forward pass, invalid step sizes, ...
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or version-incompatible files.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// A property that must hold by construction failed at runtime. Carries the
// offending sample so the breach can be reproduced.
struct InvariantViolation : std::runtime_error {
    InvariantViolation(const std::string& msg, std::vector<double> x_in,
                       std::vector<double> s_in, std::vector<double> y_in)
        : std::runtime_error(msg), x(std::move(x_in)), s(std::move(s_in)), y(std::move(y_in)) {}

    std::vector<double> x;
    std::vector<double> s;
    std::vector<double> y;
};

}  // namespace cnet
