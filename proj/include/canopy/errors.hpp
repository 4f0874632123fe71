#pragma once

#include <stdexcept>
#include <string>

namespace canopy {

// Input or contract violations. The CLI maps these to exit code 2,
// anything else to exit code 1.
class validation_error : public std::runtime_error {
public:
    explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file content; carries the 1-based line number when known.
class parse_error : public validation_error {
public:
    parse_error(const std::string& file, std::size_t line, const std::string& msg)
        : validation_error(file + ":" + std::to_string(line) + ": " + msg),
          line_(line) {}
    explicit parse_error(const std::string& msg) : validation_error(msg), line_(0) {}

    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

// Rank-deficient design matrix.
class singular_error : public validation_error {
public:
    explicit singular_error(const std::string& msg) : validation_error(msg) {}
};

// A prediction cannot be evaluated for a given metric vector (missing or
// out-of-domain predictor). Callers may catch this per unit and skip.
class prediction_domain_error : public validation_error {
public:
    explicit prediction_domain_error(const std::string& msg) : validation_error(msg) {}
};

// Iterative fit exceeded its evaluation budget.
class convergence_error : public std::runtime_error {
public:
    explicit convergence_error(const std::string& msg) : std::runtime_error(msg) {}
};

}
