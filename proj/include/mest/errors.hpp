#pragma once

#include <stdexcept>
#include <string>

namespace mest {

/** \brief Base class for every error raised by the library. */
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class QuadratureFailure : public Error {
public:
    using Error::Error;
};

class NonConvergedLimit : public Error {
public:
    NonConvergedLimit(const std::string& what, double estimate, double residual)
        : Error(what), estimate(estimate), residual(residual) {}
    double estimate;
    double residual;
};

class InfiniteNoiseVariance : public Error {
public:
    InfiniteNoiseVariance() : Error("label noise has infinite second moment") {}
};

class DegenerateDenominator : public Error {
public:
    using Error::Error;
};

class RootNotBracketed : public Error {
public:
    using Error::Error;
};

class NotConverged : public Error {
public:
    NotConverged(const std::string& what, long iterations, double residual)
        : Error(what), iterations(iterations), residual(residual) {}
    long iterations;
    double residual;
};

class InsufficientPoints : public Error {
public:
    using Error::Error;
};

class SingularSystem : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    ConfigError(const std::string& key, const std::string& msg)
        : Error(key.empty() ? msg : key + ": " + msg), key(key) {}
    std::string key;
};

}  // namespace mest
