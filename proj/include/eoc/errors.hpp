#ifndef EOC_ERRORS_HPP
#define EOC_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace eoc {

// Invalid model/problem setup, bad names, malformed input files.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Evaluation outside a function's domain (ln of a non-positive value, division by zero, ...).
class DomainError : public std::runtime_error {
public:
    explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};

// Failures of the numerical machinery: Newton non-convergence, singular Jacobians,
// non-finite states, solver breakdowns.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace eoc

#endif
