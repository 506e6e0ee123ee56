#pragma once

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace longrad {

// Error hierarchy. Validation errors exit the CLI with code 1,
// numerical failures with code 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ValidationError : Error {
    using Error::Error;
};
struct LoadError : ValidationError {
    using ValidationError::ValidationError;
};
struct IntegrityError : ValidationError {
    using ValidationError::ValidationError;
};
struct ConfigError : ValidationError {
    using ValidationError::ValidationError;
};

struct NumericalError : Error {
    using Error::Error;
};
struct DegenerateGeometryError : NumericalError {
    using NumericalError::NumericalError;
};
struct DegenerateShapeError : NumericalError {
    using NumericalError::NumericalError;
};
struct DivergenceError : NumericalError {
    using NumericalError::NumericalError;
};
struct ConvergenceError : NumericalError {
    using NumericalError::NumericalError;
};

// Numeric text with 17 significant digits: enough for double round-trip,
// so save/load is the identity.
inline std::string num17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string num_fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

inline double parse_double(const std::string& s, const std::string& context) {
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
        if (pos != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ValidationError("cannot parse number '" + s + "' (" + context + ")");
    }
}

inline long parse_long(const std::string& s, const std::string& context) {
    try {
        std::size_t pos = 0;
        long v = std::stol(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ValidationError("cannot parse integer '" + s + "' (" + context + ")");
    }
}

// Standard normal CDF and two-sided p-value.
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }
inline double two_sided_p(double z) { return std::erfc(std::fabs(z) / std::sqrt(2.0)); }

// Type-7 (linear interpolation) quantile, shared by box plots and tables.
inline double quantile_type7(std::vector<double> sorted_values, double q) {
    if (sorted_values.empty()) throw ValidationError("quantile of empty sample");
    const std::size_t n = sorted_values.size();
    if (n == 1) return sorted_values[0];
    double h = (static_cast<double>(n) - 1.0) * q;
    std::size_t lo = static_cast<std::size_t>(std::floor(h));
    if (lo >= n - 1) return sorted_values[n - 1];
    double frac = h - static_cast<double>(lo);
    return sorted_values[lo] + frac * (sorted_values[lo + 1] - sorted_values[lo]);
}

}  // namespace longrad
