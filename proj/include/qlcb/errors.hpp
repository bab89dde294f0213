#pragma once

#include <stdexcept>
#include <string>

namespace qlcb {

struct DimensionMismatch : std::invalid_argument {
    explicit DimensionMismatch(const std::string& what) : std::invalid_argument(what) {}
};

struct EmptyDataset : std::runtime_error {
    explicit EmptyDataset(const std::string& what) : std::runtime_error(what) {}
};

struct SingularGram : std::runtime_error {
    explicit SingularGram(const std::string& what) : std::runtime_error(what) {}
};

struct NoConvergence : std::runtime_error {
    explicit NoConvergence(const std::string& what) : std::runtime_error(what) {}
};

struct DivergentHorizon : std::runtime_error {
    explicit DivergentHorizon(const std::string& what) : std::runtime_error(what) {}
};

struct Diverged : std::runtime_error {
    explicit Diverged(const std::string& what) : std::runtime_error(what) {}
};

struct EmptyRegion : std::invalid_argument {
    explicit EmptyRegion(const std::string& what) : std::invalid_argument(what) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace qlcb
