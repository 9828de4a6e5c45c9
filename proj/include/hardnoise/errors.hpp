#pragma once

#include <stdexcept>
#include <string>

namespace hardnoise {

/// Invalid parameters, mismatched shapes, or inconsistent inputs.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Input data that cannot support the requested fit (e.g. all points identical).
class DegenerateDataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DivergedTrainingError : public std::runtime_error {
public:
    DivergedTrainingError(int epoch, const std::string& what)
        : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": " + what),
          epoch_(epoch) {}
    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

class UnknownMethodError : public std::out_of_range {
public:
    explicit UnknownMethodError(const std::string& name)
        : std::out_of_range("unknown partition method: " + name) {}
};

/// Raised by the one-way ANOVA when the F ratio has no finite value.
class UndefinedStatisticError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

}  // namespace hardnoise
