#pragma once

#include <stdexcept>
#include <string>

namespace uavm {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// exit codes: config_error -> 1, data_error -> 2, numeric_error -> 3.

// Invalid configuration, invalid argument combinations, contract violations.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data (archives, manifests, datasets).
struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (inputs, losses).
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor-level dimension mismatches. Messages name both offending shapes.
struct shape_error : config_error {
    using config_error::config_error;
};

}  // namespace uavm
