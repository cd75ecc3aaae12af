#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace lpa {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes do not agree for the requested operation.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Token or class index outside its valid range.
class IndexError : public Error {
public:
    using Error::Error;
};

/// API misuse that is not a shape problem (e.g. backward from a non-scalar).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Invalid model/train/experiment configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class VersionError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class LengthError : public Error {
public:
    using Error::Error;
};

class InfeasibleError : public Error {
public:
    using Error::Error;
};

/// Raised by the training loop; carries the optimizer step that failed.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, std::size_t step)
        : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

}  // namespace lpa
