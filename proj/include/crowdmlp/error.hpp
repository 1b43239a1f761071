#pragma once

#include <stdexcept>
#include <string>

namespace crowdmlp {

// Shape or extent violations: mismatched inner dimensions, non-integral
// output sizes, indivisible patch grids.
class DimensionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// An argument value outside its valid range (drop rate >= 1, window larger
// than the image, empty sample list).
class ParameterError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// API misuse: backward on a non-scalar, reusing a consumed tape, stepping an
// optimizer over parameters without gradients.
class ContractError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Inconsistent model or training configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed file contents: manifest rows, checkpoint framing, bad PNG data.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Filesystem-level failures (missing or unwritable files).
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// The operation needs data the input does not carry (e.g. cropping a sample
// that has no point annotations).
class UnsupportedError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace crowdmlp
