#pragma once

#include <stdexcept>
#include <string>

namespace equidiag {

// Error taxonomy. The CLI maps config/argument/shape/unsupported errors to
// exit code 2 and numeric/budget failures to exit code 3.

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct shape_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct argument_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct unsupported_error : std::logic_error {
    using std::logic_error::logic_error;
};

// Raised when a dense-solver size budget is exceeded.
struct budget_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Divergence, degenerate spectra, signal below measurable floor.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct insufficient_data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace equidiag
