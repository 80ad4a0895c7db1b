#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rebalance {

// Base class for everything this library throws.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad argument values, malformed configs, out-of-range requests.
struct InvalidInput : Error {
    using Error::Error;
};

// Malformed data file. `offset` is the byte offset of the problem (for CSV,
// the offset of the offending line's first byte).
struct ParseError : Error {
    ParseError(const std::string& msg, std::size_t at)
        : Error(msg + " (byte offset " + std::to_string(at) + ")"), offset(at) {}
    std::size_t offset;
};

// A sampling stratum (class or group) that must be populated is empty.
struct DegenerateStratum : Error {
    using Error::Error;
};

// An operation needs labels the dataset does not carry.
struct MissingAnnotation : Error {
    using Error::Error;
};

// A replacement pool ran out of candidate rows.
struct PoolExhausted : Error {
    using Error::Error;
};

// Training produced a non-finite loss. `step` is the failing step.
struct DivergenceError : Error {
    DivergenceError(const std::string& msg, std::size_t at)
        : Error(msg + " at step " + std::to_string(at)), step(at) {}
    std::size_t step;
};

// A requested split would leave some part empty.
struct DegenerateSplit : Error {
    using Error::Error;
};

// A probability produced by the output link left [0, 1].
struct LinkViolation : Error {
    using Error::Error;
};

// Filesystem failure.
struct IoError : Error {
    using Error::Error;
};

}  // namespace rebalance
