#include "longrad/spline.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace longrad::jointmodel {

namespace {

double pos_cube(double x) { return x > 0.0 ? x * x * x : 0.0; }
double pos_lin(double x) { return x > 0.0 ? x : 0.0; }

}  // namespace

double SplineBasis::eval(int column, double t) const {
    const double lo = knots.front(), hi = knots.back();
    const double span = hi - lo;
    if (column == 0) return (t - lo) / span;
    // truncated power form d_k(t) - d_{K-1}(t), scaled to O(1)
    const std::size_t k = static_cast<std::size_t>(column - 1);  // interior index
    const double xi_k = knots[k];                                // knots[0] is the boundary
    const double xi_last_inner = knots[knots.size() - 2];
    auto d = [&](double xi) {
        return (pos_cube(t - xi) - pos_cube(t - hi)) / (hi - xi);
    };
    return (d(xi_k) - d(xi_last_inner)) / (span * span);
}

double SplineBasis::second_derivative(int column, double t) const {
    if (column == 0) return 0.0;
    const double hi = knots.back();
    const double span = hi - knots.front();
    const std::size_t k = static_cast<std::size_t>(column - 1);
    const double xi_k = knots[k];
    const double xi_last_inner = knots[knots.size() - 2];
    auto d2 = [&](double xi) {
        return (6.0 * pos_lin(t - xi) - 6.0 * pos_lin(t - hi)) / (hi - xi);
    };
    return (d2(xi_k) - d2(xi_last_inner)) / (span * span);
}

Eigen::MatrixXd SplineBasis::evaluate(const std::vector<double>& times) const {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(times.size()), df);
    for (std::size_t i = 0; i < times.size(); ++i)
        for (int c = 0; c < df; ++c)
            m(static_cast<Eigen::Index>(i), c) = eval(c, times[i]);
    return m;
}

SplineBasis natural_spline_basis(const std::vector<double>& times, int df) {
    if (df < 1) throw ValidationError("natural_spline_basis: df must be >= 1");
    std::vector<double> distinct(times.begin(), times.end());
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < 2)
        throw NumericalError("natural_spline_basis: all observation times equal");

    SplineBasis b;
    b.df = df;
    const double lo = distinct.front(), hi = distinct.back();
    b.knots.push_back(lo);
    // interior knots at quantiles of the distinct observed times
    std::vector<double> sorted(times.begin(), times.end());
    std::sort(sorted.begin(), sorted.end());
    for (int k = 1; k < df; ++k) {
        double q = static_cast<double>(k) / df;
        b.knots.push_back(quantile_type7(sorted, q));
    }
    b.knots.push_back(hi);
    for (std::size_t i = 1; i < b.knots.size(); ++i)
        if (!(b.knots[i] >= b.knots[i - 1]))
            throw NumericalError("natural_spline_basis: knots not ascending");
    return b;
}

}  // namespace longrad::jointmodel
