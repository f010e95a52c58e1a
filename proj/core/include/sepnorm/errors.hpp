#pragma once

#include <stdexcept>
#include <string>

namespace sepnorm {

// shape/dimension disagreement between operands
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// caller broke a stated precondition
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// invalid configuration value
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// numerical procedure failed to converge
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace sepnorm
