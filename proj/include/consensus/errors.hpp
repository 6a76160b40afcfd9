#pragma once

#include <stdexcept>
#include <string>

namespace consensus {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ParameterError : public Error {
public:
    using Error::Error;
};

class ConfigurationError : public Error {
public:
    using Error::Error;
};

class DefinitenessError : public Error {
public:
    using Error::Error;
};

class SymmetryError : public Error {
public:
    using Error::Error;
};

/// Raised when the spectrum needed for a quantity is degenerate (e.g. an edgeless graph has λ_max = 0).
class DegenerateSpectrumError : public Error {
public:
    using Error::Error;
};

class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double residual)
        : Error(what + " (residual " + std::to_string(residual) + ")"), residual_(residual) {}
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

/// An operation was asked for a derivative order it does not provide.
class CapabilityError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Checkpoint and configuration do not belong together.
class CompatibilityError : public Error {
public:
    using Error::Error;
};

}  // namespace consensus
