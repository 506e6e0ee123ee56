#include "longrad/survival.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "longrad/csv.hpp"
#include "longrad/rng.hpp"

namespace longrad::survival {

const BlockSpec* SurvivalData::block(const std::string& name) const {
    for (const auto& b : blocks)
        if (b.name == name) return &b;
    return nullptr;
}

MatrixBuildReport build_matrix(const cohort::DesignSet& designs,
                               cohort::Timepoint max_timepoint) {
    MatrixBuildReport report;
    const std::size_t nf = designs.feature_names.size();
    const int max_tp = max_timepoint.index();

    std::vector<const cohort::PatientDesign*> rows;
    for (const auto& d : designs.patients) {
        bool ok = true;
        for (int tp = 1; tp <= max_tp; ++tp)
            if (!d.has_delta[tp - 1]) ok = false;
        if (ok)
            rows.push_back(&d);
        else
            report.dropped_patients.push_back(d.patient_id);
    }
    if (rows.empty()) throw ValidationError("build_matrix: no patients with all required blocks");

    static const std::array<std::string, 3> kDeltaPrefix = {"w8", "w16", "w24"};
    struct Column {
        std::string name;
        std::string block;
        int tp;           // 0 = baseline, 1..3 = delta block, -1 = demographics
        std::size_t idx;  // feature index or demographic index
    };
    std::vector<Column> cols;
    for (std::size_t f = 0; f < nf; ++f)
        cols.push_back({"x:" + designs.feature_names[f], "x", 0, f});
    for (int tp = 1; tp <= max_tp; ++tp)
        for (std::size_t f = 0; f < nf; ++f)
            cols.push_back({kDeltaPrefix[tp - 1] + ":" + designs.feature_names[f],
                            kDeltaPrefix[tp - 1], tp, f});
    for (int i = 0; i < cohort::Demographics::kCount; ++i)
        cols.push_back({cohort::Demographics::names()[i], "demographics", -1,
                        static_cast<std::size_t>(i)});

    auto cell = [&](const cohort::PatientDesign& d, const Column& c, bool& degen) -> double {
        if (c.tp == -1) {
            degen = false;
            return d.demographics.values[c.idx];
        }
        if (c.tp == 0) {
            degen = d.x_degenerate[c.idx] != 0;
            return d.x[c.idx];
        }
        degen = d.delta_degenerate[c.tp - 1][c.idx] != 0;
        return d.delta[c.tp - 1][c.idx];
    };

    // degenerate anywhere in a retained row kills the column, never imputed
    std::vector<Column> kept;
    for (const auto& c : cols) {
        bool any_degen = false;
        for (const auto* d : rows) {
            bool degen = false;
            cell(*d, c, degen);
            if (degen) {
                any_degen = true;
                break;
            }
        }
        if (any_degen)
            report.dropped_columns.push_back(c.name);
        else
            kept.push_back(c);
    }

    SurvivalData& data = report.data;
    data.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(kept.size()));
    data.time.resize(static_cast<Eigen::Index>(rows.size()));
    data.event.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        data.patient_ids.push_back(rows[r]->patient_id);
        data.time[static_cast<Eigen::Index>(r)] = rows[r]->outcome.time_days;
        data.event[static_cast<Eigen::Index>(r)] = rows[r]->outcome.event;
        for (std::size_t c = 0; c < kept.size(); ++c) {
            bool degen = false;
            data.x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                cell(*rows[r], kept[c], degen);
        }
    }
    std::string current_block;
    for (std::size_t c = 0; c < kept.size(); ++c) {
        data.column_names.push_back(kept[c].name);
        if (kept[c].block != current_block) {
            data.blocks.push_back({kept[c].block, c, 0});
            current_block = kept[c].block;
        }
        data.blocks.back().width += 1;
    }
    return report;
}

namespace {

// Indices sorted by descending time, tie groups contiguous.
std::vector<std::size_t> descending_time_order(const SurvivalData& data) {
    std::vector<std::size_t> order(data.n());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return data.time[static_cast<Eigen::Index>(a)] > data.time[static_cast<Eigen::Index>(b)];
    });
    return order;
}

struct EtaDerivatives {
    Eigen::VectorXd u;  // d nll / d eta
    Eigen::VectorXd d;  // diagonal of d^2 nll / d eta^2
};

// Breslow quantities per observation; used by the coordinate-descent fit.
EtaDerivatives eta_derivatives(const SurvivalData& data, const Eigen::VectorXd& eta) {
    const std::size_t n = data.n();
    const double shift = eta.maxCoeff();
    Eigen::VectorXd w = (eta.array() - shift).exp();

    auto order = descending_time_order(data);
    // S0 at each observation's own risk set (shifted scale)
    Eigen::VectorXd s0_at_event(static_cast<Eigen::Index>(n));
    double s0 = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        double t = data.time[static_cast<Eigen::Index>(order[i])];
        while (j < n && data.time[static_cast<Eigen::Index>(order[j])] == t) {
            s0 += w[static_cast<Eigen::Index>(order[j])];
            ++j;
        }
        for (std::size_t k = i; k < j; ++k)
            s0_at_event[static_cast<Eigen::Index>(order[k])] = s0;
        i = j;
    }

    // ascending prefix sums of 1/S0 and 1/S0^2 over event times <= y_k
    EtaDerivatives out;
    out.u.resize(static_cast<Eigen::Index>(n));
    out.d.resize(static_cast<Eigen::Index>(n));
    double acc_a = 0.0, acc_b = 0.0;
    std::size_t k = n;
    while (k > 0) {
        std::size_t j = k;  // group [j, k) ascending == reversed descending order
        double t = data.time[static_cast<Eigen::Index>(order[k - 1])];
        while (j > 0 && data.time[static_cast<Eigen::Index>(order[j - 1])] == t) --j;
        double s0_group = s0_at_event[static_cast<Eigen::Index>(order[k - 1])];
        int events_here = 0;
        for (std::size_t q = j; q < k; ++q)
            events_here += data.event[static_cast<Eigen::Index>(order[q])];
        acc_a += events_here / s0_group;
        acc_b += events_here / (s0_group * s0_group);
        for (std::size_t q = j; q < k; ++q) {
            auto idx = static_cast<Eigen::Index>(order[q]);
            double ek = w[idx];
            out.u[idx] = -(data.event[idx] - ek * acc_a) / static_cast<double>(n);
            out.d[idx] = (ek * acc_a - ek * ek * acc_b) / static_cast<double>(n);
        }
        k = j;
    }
    return out;
}

CoxObjective cox_nll_impl(const SurvivalData& data, const Eigen::VectorXd& theta,
                          Eigen::MatrixXd* hessian) {
    const std::size_t n = data.n();
    const std::size_t p = data.p();
    if (n == 0) throw ValidationError("cox_nll: empty design");
    if (static_cast<std::size_t>(theta.size()) != p)
        throw ValidationError("cox_nll: theta size mismatch");
    if (data.event_count() == 0) throw ValidationError("cox_nll: no events in data");

    Eigen::VectorXd eta = p > 0 ? Eigen::VectorXd(data.x * theta)
                                : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    if (!eta.allFinite()) throw NumericalError("cox_nll: non-finite linear predictor");
    const double shift = eta.maxCoeff();
    Eigen::VectorXd w = (eta.array() - shift).exp();

    auto order = descending_time_order(data);
    CoxObjective out;
    out.gradient = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    if (hessian) *hessian = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p),
                                                  static_cast<Eigen::Index>(p));

    double s0 = 0.0;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    Eigen::MatrixXd s2;
    if (hessian) s2 = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p),
                                            static_cast<Eigen::Index>(p));

    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        double t = data.time[static_cast<Eigen::Index>(order[i])];
        while (j < n && data.time[static_cast<Eigen::Index>(order[j])] == t) {
            auto idx = static_cast<Eigen::Index>(order[j]);
            double wk = w[idx];
            s0 += wk;
            if (p > 0) {
                s1.noalias() += wk * data.x.row(idx).transpose();
                if (hessian)
                    s2.noalias() += wk * data.x.row(idx).transpose() * data.x.row(idx);
            }
            ++j;
        }
        for (std::size_t q = i; q < j; ++q) {
            auto idx = static_cast<Eigen::Index>(order[q]);
            if (!data.event[idx]) continue;
            out.value -= eta[idx] - (shift + std::log(s0));
            if (p > 0) {
                Eigen::VectorXd mean = s1 / s0;
                out.gradient.noalias() -= data.x.row(idx).transpose() - mean;
                if (hessian) hessian->noalias() += s2 / s0 - mean * mean.transpose();
            }
        }
        i = j;
    }
    out.value /= static_cast<double>(n);
    out.gradient /= static_cast<double>(n);
    if (hessian) *hessian /= static_cast<double>(n);
    return out;
}

}  // namespace

CoxObjective cox_nll(const SurvivalData& data, const Eigen::VectorXd& theta) {
    return cox_nll_impl(data, theta, nullptr);
}

CoxObjective cox_nll_with_hessian(const SurvivalData& data, const Eigen::VectorXd& theta,
                                  Eigen::MatrixXd& hessian) {
    return cox_nll_impl(data, theta, &hessian);
}

CoxFit fit_cox(const SurvivalData& data, double gradient_tol, int max_iterations) {
    const std::size_t p = data.p();
    CoxFit fit;
    fit.theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    if (p == 0) {
        fit.nll = cox_nll(data, fit.theta).value;
        fit.standard_errors.resize(0);
        return fit;
    }

    Eigen::MatrixXd hess;
    CoxObjective cur = cox_nll_with_hessian(data, fit.theta, hess);
    for (int iter = 0; iter < max_iterations; ++iter) {
        if (cur.gradient.norm() <= gradient_tol) {
            fit.iterations = iter;
            // observed information = n * hessian of the mean nll
            Eigen::MatrixXd info = static_cast<double>(data.n()) * hess;
            Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
            if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
                throw NumericalError("fit_cox: singular observed information matrix");
            Eigen::MatrixXd cov =
                ldlt.solve(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(p),
                                                     static_cast<Eigen::Index>(p)));
            fit.standard_errors = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
            fit.nll = cur.value;
            return fit;
        }
        Eigen::LDLT<Eigen::MatrixXd> ldlt(hess);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
            ldlt.vectorD().minCoeff() < 1e-12)
            throw NumericalError(
                "fit_cox: singular information matrix (collinear columns or separation)");
        Eigen::VectorXd step = ldlt.solve(cur.gradient);
        double scale = 1.0;
        for (int half = 0; half < 40; ++half) {
            Eigen::VectorXd candidate = fit.theta - scale * step;
            CoxObjective trial = cox_nll_with_hessian(data, candidate, hess);
            if (trial.value <= cur.value + 1e-14) {
                fit.theta = candidate;
                cur = trial;
                break;
            }
            scale *= 0.5;
            if (half == 39)
                throw ConvergenceError("fit_cox: line search failed to reduce the objective");
        }
        if (fit.theta.norm() > 50.0)
            throw DivergenceError(
                "fit_cox: coefficients diverging (likely separation); use the penalized path");
    }
    throw ConvergenceError("fit_cox: Newton iterations exhausted before reaching tolerance");
}

namespace {

struct Standardization {
    Eigen::VectorXd center;
    Eigen::VectorXd scale;
    Eigen::MatrixXd xs;  // standardized matrix
};

Standardization standardize(const SurvivalData& data) {
    Standardization s;
    const auto n = data.x.rows();
    const auto p = data.x.cols();
    s.center = data.x.colwise().mean();
    s.scale.resize(p);
    s.xs.resize(n, p);
    for (Eigen::Index j = 0; j < p; ++j) {
        Eigen::VectorXd centered = data.x.col(j).array() - s.center[j];
        double sd = std::sqrt(centered.squaredNorm() / static_cast<double>(n));
        s.scale[j] = sd > 0.0 ? sd : 1.0;
        s.xs.col(j) = centered / s.scale[j];
    }
    return s;
}

// one lambda of the penalized fit on the standardized problem
void fit_single_lambda(const SurvivalData& data, const Eigen::MatrixXd& xs,
                       const std::vector<std::uint8_t>& penalized, double lambda,
                       Eigen::VectorXd& theta, const LassoConfig& cfg) {
    const auto n = xs.rows();
    const auto p = xs.cols();
    SurvivalData std_data;  // shares outcomes, uses standardized covariates
    std_data.x = xs;
    std_data.time = data.time;
    std_data.event = data.event;

    Eigen::VectorXd eta = xs * theta;
    for (int outer = 0; outer < cfg.max_outer_iterations; ++outer) {
        EtaDerivatives der = eta_derivatives(std_data, eta);
        // working response z = eta - u/d where the curvature is usable
        Eigen::VectorXd wvec(n), z(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (der.d[i] > 1e-12) {
                wvec[i] = der.d[i];
                z[i] = eta[i] - der.u[i] / der.d[i];
            } else {
                wvec[i] = 0.0;
                z[i] = eta[i];
            }
        }
        Eigen::VectorXd residual = z - eta;
        Eigen::VectorXd denom(p);
        for (Eigen::Index j = 0; j < p; ++j)
            denom[j] = (wvec.array() * xs.col(j).array().square()).sum();

        Eigen::VectorXd theta_before_outer = theta;
        for (int sweep = 0; sweep < cfg.max_cd_sweeps; ++sweep) {
            double max_delta = 0.0;
            for (Eigen::Index j = 0; j < p; ++j) {
                if (denom[j] <= 1e-12) continue;
                double rho = (wvec.array() * xs.col(j).array() * residual.array()).sum() +
                             denom[j] * theta[j];
                double updated;
                if (penalized[static_cast<std::size_t>(j)]) {
                    double thresh = lambda;
                    if (rho > thresh)
                        updated = (rho - thresh) / denom[j];
                    else if (rho < -thresh)
                        updated = (rho + thresh) / denom[j];
                    else
                        updated = 0.0;
                } else {
                    updated = rho / denom[j];
                }
                double delta = updated - theta[j];
                if (delta != 0.0) {
                    residual.noalias() -= delta * xs.col(j);
                    theta[j] = updated;
                    max_delta = std::max(max_delta, std::fabs(delta));
                }
            }
            if (max_delta < cfg.tol) break;
        }
        eta.noalias() = xs * theta;
        if ((theta - theta_before_outer).cwiseAbs().maxCoeff() < 1e-9) return;
    }
    throw ConvergenceError("fit_cox_lasso_path: no convergence at lambda = " + num17(lambda));
}

double kkt_violation_std(const SurvivalData& data, const Eigen::MatrixXd& xs,
                         const std::vector<std::uint8_t>& penalized, double lambda,
                         const Eigen::VectorXd& theta_std) {
    SurvivalData std_data;
    std_data.x = xs;
    std_data.time = data.time;
    std_data.event = data.event;
    CoxObjective obj = cox_nll(std_data, theta_std);
    double worst = 0.0;
    for (Eigen::Index j = 0; j < xs.cols(); ++j) {
        double g = obj.gradient[j];
        if (!penalized[static_cast<std::size_t>(j)]) {
            worst = std::max(worst, std::fabs(g));
        } else if (theta_std[j] == 0.0) {
            worst = std::max(worst, std::fabs(g) - lambda);
        } else {
            worst = std::max(worst, std::fabs(g + lambda * (theta_std[j] > 0 ? 1.0 : -1.0)));
        }
    }
    return worst;
}

}  // namespace

LassoPath fit_cox_lasso_path_on_grid(const SurvivalData& data, const std::vector<double>& lambdas,
                                     const LassoConfig& cfg) {
    if (lambdas.empty()) throw ValidationError("lasso path: empty lambda grid");
    for (std::size_t i = 1; i < lambdas.size(); ++i)
        if (!(lambdas[i] < lambdas[i - 1]))
            throw ValidationError("lasso path: lambda grid must be strictly decreasing");

    const auto p = data.x.cols();
    Standardization s = standardize(data);
    std::vector<std::uint8_t> penalized(static_cast<std::size_t>(p), 1);
    for (std::size_t j : cfg.penalty_free) {
        if (j >= static_cast<std::size_t>(p))
            throw ValidationError("lasso path: penalty-free index out of range");
        penalized[j] = 0;
    }

    LassoPath path;
    path.lambda_max = lambdas.front();
    path.column_center = s.center;
    path.column_scale = s.scale;
    path.penalized = penalized;

    Eigen::VectorXd theta_std = Eigen::VectorXd::Zero(p);
    for (double lambda : lambdas) {
        fit_single_lambda(data, s.xs, penalized, lambda, theta_std, cfg);
        double violation = kkt_violation_std(data, s.xs, penalized, lambda, theta_std);
        if (violation > cfg.kkt_tol)
            throw ConvergenceError("fit_cox_lasso_path: KKT violation " + num17(violation) +
                                   " at lambda = " + num17(lambda));
        LassoPathPoint pt;
        pt.lambda = lambda;
        pt.theta.resize(p);
        pt.nonzero = 0;
        for (Eigen::Index j = 0; j < p; ++j) {
            pt.theta[j] = theta_std[j] / s.scale[j];
            if (theta_std[j] != 0.0) pt.nonzero += 1;
        }
        path.points.push_back(std::move(pt));
    }
    return path;
}

namespace {

std::vector<double> default_lambda_grid(const SurvivalData& data, const LassoConfig& cfg) {
    // gradient at the solution of the penalty-free-only model (theta = 0
    // when everything is penalised)
    const auto p = data.x.cols();
    Standardization s = standardize(data);
    std::vector<std::uint8_t> penalized(static_cast<std::size_t>(p), 1);
    for (std::size_t j : cfg.penalty_free) penalized[j] = 0;

    Eigen::VectorXd theta_std = Eigen::VectorXd::Zero(p);
    if (!cfg.penalty_free.empty()) {
        // unpenalised fit over the free columns only (huge lambda)
        fit_single_lambda(data, s.xs, penalized, 1e100, theta_std, cfg);
    }
    SurvivalData std_data;
    std_data.x = s.xs;
    std_data.time = data.time;
    std_data.event = data.event;
    CoxObjective obj = cox_nll(std_data, theta_std);
    double lambda_max = 0.0;
    for (Eigen::Index j = 0; j < p; ++j)
        if (penalized[static_cast<std::size_t>(j)])
            lambda_max = std::max(lambda_max, std::fabs(obj.gradient[j]));
    if (lambda_max <= 0.0) lambda_max = 1e-3;

    std::vector<double> lambdas;
    const int k = std::max(2, cfg.n_lambda);
    const double log_max = std::log(lambda_max);
    const double log_min = std::log(lambda_max * cfg.lambda_min_ratio);
    for (int i = 0; i < k; ++i)
        lambdas.push_back(std::exp(log_max + (log_min - log_max) * i / (k - 1)));
    return lambdas;
}

}  // namespace

LassoPath fit_cox_lasso_path(const SurvivalData& data, const LassoConfig& cfg) {
    return fit_cox_lasso_path_on_grid(data, default_lambda_grid(data, cfg), cfg);
}

double kkt_violation(const SurvivalData& data, const LassoPath& path, std::size_t point_index) {
    const auto& pt = path.points.at(point_index);
    Standardization s = standardize(data);
    Eigen::VectorXd theta_std(pt.theta.size());
    for (Eigen::Index j = 0; j < pt.theta.size(); ++j)
        theta_std[j] = pt.theta[j] * s.scale[j];
    return kkt_violation_std(data, s.xs, path.penalized, pt.lambda, theta_std);
}

namespace {

SurvivalData subset_rows(const SurvivalData& data, const std::vector<std::size_t>& rows) {
    SurvivalData out;
    out.x.resize(static_cast<Eigen::Index>(rows.size()), data.x.cols());
    out.time.resize(static_cast<Eigen::Index>(rows.size()));
    out.event.resize(static_cast<Eigen::Index>(rows.size()));
    out.column_names = data.column_names;
    out.blocks = data.blocks;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.x.row(static_cast<Eigen::Index>(i)) = data.x.row(static_cast<Eigen::Index>(rows[i]));
        out.time[static_cast<Eigen::Index>(i)] = data.time[static_cast<Eigen::Index>(rows[i])];
        out.event[static_cast<Eigen::Index>(i)] = data.event[static_cast<Eigen::Index>(rows[i])];
        if (!data.patient_ids.empty()) out.patient_ids.push_back(data.patient_ids[rows[i]]);
    }
    return out;
}

}  // namespace

LassoPath cv_cindex_path(const SurvivalData& data, int folds, std::uint64_t seed,
                         const LassoConfig& cfg) {
    if (folds < 2) throw ValidationError("cv_cindex_path: folds must be >= 2");
    const std::size_t n = data.n();
    if (n < static_cast<std::size_t>(folds))
        throw ValidationError("cv_cindex_path: more folds than patients");

    // deal shuffled patients round-robin; every fold must contain an event
    std::vector<int> fold_of(n);
    bool ok = false;
    for (int attempt = 0; attempt < 20 && !ok; ++attempt) {
        Rng rng = Rng::substream(seed, "cv-fold-shuffle", static_cast<std::uint64_t>(attempt));
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        rng.shuffle(idx);
        for (std::size_t i = 0; i < n; ++i) fold_of[idx[i]] = static_cast<int>(i % folds);
        std::vector<int> fold_events(folds, 0);
        for (std::size_t i = 0; i < n; ++i)
            if (data.event[static_cast<Eigen::Index>(i)]) fold_events[fold_of[i]] += 1;
        ok = std::all_of(fold_events.begin(), fold_events.end(), [](int e) { return e > 0; });
    }
    if (!ok)
        throw ValidationError(
            "cv_cindex_path: could not stratify folds with events after 20 reseeded attempts");

    std::vector<double> lambdas = default_lambda_grid(data, cfg);
    LassoPath full = fit_cox_lasso_path_on_grid(data, lambdas, cfg);

    const std::size_t k = lambdas.size();
    std::vector<std::vector<double>> fold_c(k);
    for (int f = 0; f < folds; ++f) {
        std::vector<std::size_t> train, valid;
        for (std::size_t i = 0; i < n; ++i) (fold_of[i] == f ? valid : train).push_back(i);
        SurvivalData train_data = subset_rows(data, train);
        SurvivalData valid_data = subset_rows(data, valid);
        LassoPath fold_path = fit_cox_lasso_path_on_grid(train_data, lambdas, cfg);
        std::vector<double> vt(valid.size());
        std::vector<int> ve(valid.size());
        for (std::size_t i = 0; i < valid.size(); ++i) {
            vt[i] = valid_data.time[static_cast<Eigen::Index>(i)];
            ve[i] = valid_data.event[static_cast<Eigen::Index>(i)];
        }
        for (std::size_t li = 0; li < k; ++li) {
            std::vector<double> risk = risk_scores(valid_data, fold_path.points[li].theta);
            double c;
            try {
                c = harrell_cindex(risk, vt, ve);
            } catch (const NumericalError&) {
                c = 0.5;  // no usable pairs in this fold
            }
            fold_c[li].push_back(c);
        }
    }

    double best_mean = -1.0;
    for (std::size_t li = 0; li < k; ++li) {
        double mean = std::accumulate(fold_c[li].begin(), fold_c[li].end(), 0.0) /
                      static_cast<double>(folds);
        double ss = 0.0;
        for (double c : fold_c[li]) ss += (c - mean) * (c - mean);
        double se = std::sqrt(ss / (folds - 1.0)) / std::sqrt(static_cast<double>(folds));
        full.points[li].cv_mean_c = mean;
        full.points[li].cv_se_c = se;
        if (mean > best_mean) {  // ties keep the larger lambda
            best_mean = mean;
            full.opt_index = li;
        }
    }
    return full;
}

double harrell_cindex(const std::vector<double>& risk_scores, const std::vector<double>& times,
                      const std::vector<int>& events) {
    const std::size_t n = risk_scores.size();
    if (times.size() != n || events.size() != n)
        throw ValidationError("harrell_cindex: input lengths differ");
    double concordant = 0.0;
    std::size_t usable = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            std::size_t early = i, late = j;
            if (times[j] < times[i]) {
                early = j;
                late = i;
            } else if (times[i] == times[j]) {
                continue;  // no ordering of failure times
            }
            if (!events[early]) continue;  // earlier time censored: not usable
            ++usable;
            if (risk_scores[early] > risk_scores[late])
                concordant += 1.0;
            else if (risk_scores[early] == risk_scores[late])
                concordant += 0.5;
        }
    if (usable == 0)
        throw NumericalError("harrell_cindex: no usable pairs (C-index undefined)");
    return concordant / static_cast<double>(usable);
}

namespace {

double cindex_on_indices(const std::vector<double>& risk, const std::vector<double>& times,
                         const std::vector<int>& events, const std::vector<std::size_t>& idx) {
    std::vector<double> r(idx.size()), t(idx.size());
    std::vector<int> e(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        r[i] = risk[idx[i]];
        t[i] = times[idx[i]];
        e[i] = events[idx[i]];
    }
    return harrell_cindex(r, t, e);
}

std::vector<std::size_t> draw_resample(Rng& rng, std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (auto& v : idx) v = static_cast<std::size_t>(rng.uniform_index(n));
    return idx;
}

}  // namespace

CIndexEstimate bootstrap_cindex_ci(const std::vector<double>& risk_scores,
                                   const std::vector<double>& times,
                                   const std::vector<int>& events, int b, std::uint64_t seed) {
    if (b < 2) throw ValidationError("bootstrap_cindex_ci: need at least 2 resamples");
    const std::size_t n = risk_scores.size();
    CIndexEstimate est;
    est.point = harrell_cindex(risk_scores, times, events);
    est.resamples = b;
    std::vector<double> cs(static_cast<std::size_t>(b));
    for (int bi = 0; bi < b; ++bi) {
        Rng rng = Rng::substream(seed, "bootstrap", static_cast<std::uint64_t>(bi));
        bool done = false;
        for (int attempt = 0; attempt < 10 && !done; ++attempt) {
            auto idx = draw_resample(rng, n);
            try {
                cs[static_cast<std::size_t>(bi)] = cindex_on_indices(risk_scores, times, events, idx);
                done = true;
            } catch (const NumericalError&) {
            }
        }
        if (!done)
            throw NumericalError(
                "bootstrap_cindex_ci: resample without usable pairs after 10 retries");
    }
    double mean = std::accumulate(cs.begin(), cs.end(), 0.0) / b;
    double ss = 0.0;
    for (double c : cs) ss += (c - mean) * (c - mean);
    est.mean_boot = mean;
    est.se_boot = std::sqrt(ss / (b - 1.0));
    est.ci_lo = mean - 1.96 * est.se_boot;
    est.ci_hi = mean + 1.96 * est.se_boot;
    return est;
}

ZTestResult compare_cindex_z(const std::vector<double>& risk_a, const std::vector<double>& risk_b,
                             const std::vector<double>& times, const std::vector<int>& events,
                             int b, std::uint64_t seed) {
    if (risk_a.size() != risk_b.size())
        throw ValidationError("compare_cindex_z: models must score the same patients");
    if (b < 2) throw ValidationError("compare_cindex_z: need at least 2 resamples");
    const std::size_t n = risk_a.size();
    std::vector<double> diffs(static_cast<std::size_t>(b));
    for (int bi = 0; bi < b; ++bi) {
        Rng rng = Rng::substream(seed, "bootstrap", static_cast<std::uint64_t>(bi));
        bool done = false;
        for (int attempt = 0; attempt < 10 && !done; ++attempt) {
            auto idx = draw_resample(rng, n);
            try {
                double ca = cindex_on_indices(risk_a, times, events, idx);
                double cb = cindex_on_indices(risk_b, times, events, idx);
                diffs[static_cast<std::size_t>(bi)] = ca - cb;
                done = true;
            } catch (const NumericalError&) {
            }
        }
        if (!done)
            throw NumericalError(
                "compare_cindex_z: resample without usable pairs after 10 retries");
    }
    double mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) / b;
    double ss = 0.0;
    for (double d : diffs) ss += (d - mean) * (d - mean);
    double se = std::sqrt(ss / (b - 1.0));
    ZTestResult out;
    if (se == 0.0) {
        out.z = 0.0;
        out.p_two_sided = mean == 0.0 ? 1.0 : 0.0;
        if (mean != 0.0) out.z = mean > 0 ? std::numeric_limits<double>::infinity()
                                          : -std::numeric_limits<double>::infinity();
    } else {
        out.z = mean / se;
        out.p_two_sided = two_sided_p(out.z);
    }
    return out;
}

BaselineHazard breslow_baseline_hazard(const SurvivalData& data, const Eigen::VectorXd& theta) {
    const std::size_t n = data.n();
    Eigen::VectorXd eta = data.p() > 0 ? Eigen::VectorXd(data.x * theta)
                                       : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    Eigen::VectorXd w = eta.array().exp();

    auto order = descending_time_order(data);
    BaselineHazard h;
    std::vector<std::pair<double, double>> jumps;  // time, d / S0
    double s0 = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        double t = data.time[static_cast<Eigen::Index>(order[i])];
        int d = 0;
        while (j < n && data.time[static_cast<Eigen::Index>(order[j])] == t) {
            s0 += w[static_cast<Eigen::Index>(order[j])];
            d += data.event[static_cast<Eigen::Index>(order[j])];
            ++j;
        }
        if (d > 0) jumps.push_back({t, d / s0});
        i = j;
    }
    std::reverse(jumps.begin(), jumps.end());  // ascending time
    double cum = 0.0;
    for (const auto& [t, dh] : jumps) {
        cum += dh;
        h.times.push_back(t);
        h.cumhaz.push_back(cum);
    }
    return h;
}

double BaselineHazard::at(double t) const {
    auto it = std::upper_bound(times.begin(), times.end(), t);
    if (it == times.begin()) return 0.0;
    return cumhaz[static_cast<std::size_t>(it - times.begin()) - 1];
}

std::vector<double> risk_scores(const SurvivalData& data, const Eigen::VectorXd& theta) {
    Eigen::VectorXd eta = data.p() > 0
                              ? Eigen::VectorXd(data.x * theta)
                              : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(data.n()));
    return std::vector<double>(eta.data(), eta.data() + eta.size());
}

std::string cvpath_to_csv(const LassoPath& path) {
    CsvTable t(std::vector<std::string>{"lambda", "mean_c", "se_c", "nnz"});
    for (const auto& pt : path.points)
        t.add_row({num17(pt.lambda), num17(pt.cv_mean_c), num17(pt.cv_se_c),
                   std::to_string(pt.nonzero)});
    return t.to_string();
}

}  // namespace longrad::survival
