#pragma once

#include <stdexcept>
#include <string>

namespace ugs {

// Base for every error the library raises. `kind()` is a stable machine-readable tag
// that the CLI echoes in its error JSON.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& what) : Error("dimension_mismatch", what) {}
};

struct FormatError : Error {
    explicit FormatError(const std::string& what) : Error("format_error", what) {}
};

struct InvalidArgument : Error {
    explicit InvalidArgument(const std::string& what) : Error("invalid_argument", what) {}
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error("io_error", what) {}
};

struct ConvergenceError : Error {
    explicit ConvergenceError(const std::string& what) : Error("non_convergence", what) {}
};

struct NumericalError : Error {
    explicit NumericalError(const std::string& what) : Error("non_finite", what) {}
};

}  // namespace ugs
