#pragma once

#include <stdexcept>
#include <string>

namespace mdnet {

// Caller broke a documented precondition (shape mismatch, bad argument).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Malformed or truncated file, bad magic/version.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training pair without usable overlap (no anchors, empty validity mask).
class DegeneratePair : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// NaN/Inf showed up where it must not.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Homography sampling could not satisfy its constraints.
class SamplingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what)
{
    if (!cond) throw ContractViolation(what);
}

} // namespace mdnet
