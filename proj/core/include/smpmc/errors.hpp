#pragma once

#include <stdexcept>
#include <string>

namespace smpmc {

class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define SMPMC_ERROR(Name)                                                     \
    class Name : public Error {                                               \
    public:                                                                   \
        explicit Name(const std::string& what) : Error(#Name, what) {}        \
    };

SMPMC_ERROR(InvalidArgument)
SMPMC_ERROR(NonFiniteCoefficient)
SMPMC_ERROR(UnknownModel)
SMPMC_ERROR(InvalidParams)
SMPMC_ERROR(NewtonDivergence)
SMPMC_ERROR(NonFiniteState)
SMPMC_ERROR(SpikeOutsideHorizon)
SMPMC_ERROR(InsufficientPaths)
SMPMC_ERROR(SingularDesignMatrix)
SMPMC_ERROR(NonFiniteRegression)
SMPMC_ERROR(InsufficientInnerPaths)
SMPMC_ERROR(EmptyControlGrid)
SMPMC_ERROR(ConfigParseError)

#undef SMPMC_ERROR

}  // namespace smpmc
