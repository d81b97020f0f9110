#pragma once

#include <stdexcept>
#include <string>

namespace preflab {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Unknown prompt or response identifier.
struct LookupError : Error {
    using Error::Error;
};

// A record or document failed schema/invariant checks.
struct ValidationError : Error {
    using Error::Error;
};

struct ParseError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

// Two objects do not share a Space.
struct ShapeError : Error {
    using Error::Error;
};

// Input outside the mathematical domain of an operation (e.g. preference
// probability exactly 0 or 1 fed to the pi_G reconstruction).
struct DomainError : Error {
    using Error::Error;
};

// Preference table is not BT-consistent; carries max log-odds violation.
struct ConsistencyError : Error {
    double max_violation;
    ConsistencyError(const std::string& msg, double violation)
        : Error(msg), max_violation(violation) {}
};

struct AnnotationError : Error {
    using Error::Error;
};

// Remote annotator returned a malformed or out-of-range response.
struct ProtocolError : Error {
    using Error::Error;
};

struct InputError : Error {
    using Error::Error;
};

struct ReportError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Training loss blew past the guard threshold.
struct DivergenceError : Error {
    int step;
    DivergenceError(const std::string& msg, int at_step)
        : Error(msg), step(at_step) {}
};

}  // namespace preflab
