#pragma once

#include <Eigen/Dense>
#include <vector>

#include "longrad/common.hpp"

namespace longrad::jointmodel {

// Natural cubic spline basis without intercept: boundary knots at the
// observed min/max, interior knots at quantiles (df=2 puts one interior knot
// at the median). Linear beyond the boundary knots.
struct SplineBasis {
    std::vector<double> knots;  // ascending; first/last are boundary knots
    int df = 2;

    double eval(int column, double t) const;
    double second_derivative(int column, double t) const;
    Eigen::MatrixXd evaluate(const std::vector<double>& times) const;  // n x df
};

SplineBasis natural_spline_basis(const std::vector<double>& times, int df = 2);

}  // namespace longrad::jointmodel
