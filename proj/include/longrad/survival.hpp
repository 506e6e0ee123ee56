#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "longrad/cohort.hpp"
#include "longrad/common.hpp"

namespace longrad::survival {

struct BlockSpec {
    std::string name;  // "x", "w8", "w16", "w24", "demographics"
    std::size_t offset = 0;
    std::size_t width = 0;
};

// Flattened design matrix plus outcomes. Column order: baseline block, then
// delta blocks in week order, then the 9 demographics (ARM last).
struct SurvivalData {
    Eigen::MatrixXd x;
    Eigen::VectorXd time;
    Eigen::VectorXi event;
    std::vector<std::string> column_names;
    std::vector<BlockSpec> blocks;
    std::vector<std::string> patient_ids;

    std::size_t n() const { return static_cast<std::size_t>(x.rows()); }
    std::size_t p() const { return static_cast<std::size_t>(x.cols()); }
    int event_count() const { return event.sum(); }
    const BlockSpec* block(const std::string& name) const;
};

struct MatrixBuildReport {
    SurvivalData data;
    std::vector<std::string> dropped_patients;  // required block absent
    std::vector<std::string> dropped_columns;   // degenerate cell present
};

// Complete-case rows on the blocks required by max_timepoint; columns with
// degenerate cells among the retained rows are dropped, not imputed.
MatrixBuildReport build_matrix(const cohort::DesignSet& designs, cohort::Timepoint max_timepoint);

// Negative log partial likelihood (Breslow ties), averaged over patients.
struct CoxObjective {
    double value = 0.0;
    Eigen::VectorXd gradient;
};
CoxObjective cox_nll(const SurvivalData& data, const Eigen::VectorXd& theta);
CoxObjective cox_nll_with_hessian(const SurvivalData& data, const Eigen::VectorXd& theta,
                                  Eigen::MatrixXd& hessian);

struct CoxFit {
    Eigen::VectorXd theta;
    Eigen::VectorXd standard_errors;
    double nll = 0.0;
    int iterations = 0;
};

// Unpenalised Newton fit; gradient norm tolerance 1e-9.
CoxFit fit_cox(const SurvivalData& data, double gradient_tol = 1e-9, int max_iterations = 200);

struct LassoConfig {
    int n_lambda = 100;
    double lambda_min_ratio = 0.01;
    std::vector<std::size_t> penalty_free;  // column indices never penalised
    int max_outer_iterations = 200;
    int max_cd_sweeps = 10000;
    double tol = 1e-10;
    double kkt_tol = 1e-6;
};

struct LassoPathPoint {
    double lambda = 0.0;
    Eigen::VectorXd theta;  // original scale
    int nonzero = 0;
    double cv_mean_c = std::numeric_limits<double>::quiet_NaN();
    double cv_se_c = std::numeric_limits<double>::quiet_NaN();
};

struct LassoPath {
    std::vector<LassoPathPoint> points;  // strictly decreasing lambda
    double lambda_max = 0.0;
    std::size_t opt_index = 0;  // set by cross-validation
    // internal standardisation, kept so KKT conditions can be audited
    Eigen::VectorXd column_center;
    Eigen::VectorXd column_scale;
    std::vector<std::uint8_t> penalized;
};

// Cyclic coordinate descent on the quadratic approximation, warm starts down
// a log-spaced grid; KKT verified at every lambda.
LassoPath fit_cox_lasso_path(const SurvivalData& data, const LassoConfig& cfg = {});
LassoPath fit_cox_lasso_path_on_grid(const SurvivalData& data, const std::vector<double>& lambdas,
                                     const LassoConfig& cfg);

// Largest KKT violation of a path point on the standardised scale.
double kkt_violation(const SurvivalData& data, const LassoPath& path, std::size_t point_index);

// 5-fold CV over the shared full-data lambda grid; lambda_opt maximises the
// mean validation C-index. Deterministic given seed.
LassoPath cv_cindex_path(const SurvivalData& data, int folds, std::uint64_t seed,
                         const LassoConfig& cfg = {});

// Harrell concordance: a pair is usable when the smaller time is an event
// and times differ; risk-score ties count 0.5.
double harrell_cindex(const std::vector<double>& risk_scores, const std::vector<double>& times,
                      const std::vector<int>& events);

struct CIndexEstimate {
    double point = 0.0;
    double mean_boot = 0.0;
    double se_boot = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    int resamples = 0;
};

CIndexEstimate bootstrap_cindex_ci(const std::vector<double>& risk_scores,
                                   const std::vector<double>& times,
                                   const std::vector<int>& events, int b = 1000,
                                   std::uint64_t seed = 0);

struct ZTestResult {
    double z = 0.0;
    double p_two_sided = 1.0;
};

// Paired bootstrap of C_A - C_B over shared resamples.
ZTestResult compare_cindex_z(const std::vector<double>& risk_a, const std::vector<double>& risk_b,
                             const std::vector<double>& times, const std::vector<int>& events,
                             int b = 1000, std::uint64_t seed = 0);

struct BaselineHazard {
    std::vector<double> times;   // ascending distinct event times
    std::vector<double> cumhaz;  // cumulative hazard after each jump
    double at(double t) const;
};

BaselineHazard breslow_baseline_hazard(const SurvivalData& data, const Eigen::VectorXd& theta);

std::vector<double> risk_scores(const SurvivalData& data, const Eigen::VectorXd& theta);

std::string cvpath_to_csv(const LassoPath& path);

}  // namespace longrad::survival
