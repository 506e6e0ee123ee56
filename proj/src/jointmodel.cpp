#include "longrad/jointmodel.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

#include "longrad/csv.hpp"
#include "longrad/rng.hpp"
#include "nlohmann/json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace longrad::jointmodel {

const std::vector<FeatureSpec>& model1_features() {
    static const std::vector<FeatureSpec> kF = {{"shape2D_Elongation", false},
                                                {"shape2D_MeshSurface", true},
                                                {"shape2D_MinorAxisLength", true}};
    return kF;
}

const std::vector<FeatureSpec>& model2_features() {
    static const std::vector<FeatureSpec> kF = {{"firstorder_TotalEnergy", false},
                                                {"firstorder_Mean", false},
                                                {"firstorder_Kurtosis", false}};
    return kF;
}

const std::vector<FeatureSpec>& model3_features() {
    static const std::vector<FeatureSpec> kF = {{"shape2D_MaximumDiameter", true},
                                                {"shape2D_MajorAxisLength", true},
                                                {"shape2D_MinorAxisLength", true}};
    return kF;
}

const std::vector<std::string>& default_jm_demographics() {
    static const std::vector<std::string> kD = {"ALP", "HGB", "AST", "Age", "LIVERBL"};
    return kD;
}

JointModelData build_joint_data(const cohort::Cohort& cohort, const cohort::FeatureTable& table,
                                const std::vector<FeatureSpec>& features,
                                const std::vector<std::string>& demographics_subset) {
    JointModelData data;
    data.features = features;
    data.demographic_names = demographics_subset;

    std::vector<std::size_t> feature_cols;
    for (const auto& f : features) {
        auto it = std::find(table.feature_names.begin(), table.feature_names.end(), f.name);
        if (it == table.feature_names.end())
            throw ValidationError("joint model feature '" + f.name + "' not in feature table");
        feature_cols.push_back(static_cast<std::size_t>(it - table.feature_names.begin()));
    }
    std::vector<int> dem_idx;
    for (const auto& d : demographics_subset) {
        const auto& names = cohort::Demographics::names();
        auto it = std::find(names.begin(), names.end(), d);
        if (it == names.end()) throw ValidationError("unknown demographic '" + d + "'");
        dem_idx.push_back(static_cast<int>(it - names.begin()));
    }

    // mean feature value per (patient, timepoint) across that patient's tracks
    struct Acc {
        std::vector<double> sum;
        std::vector<std::size_t> cnt;
    };
    std::map<std::pair<std::string, int>, Acc> acc;
    for (const auto& row : table.rows) {
        auto& a = acc.try_emplace({row.patient_id, row.timepoint.index()}).first->second;
        if (a.sum.empty()) {
            a.sum.assign(features.size(), 0.0);
            a.cnt.assign(features.size(), 0);
        }
        for (std::size_t f = 0; f < features.size(); ++f) {
            if (row.degenerate[feature_cols[f]]) continue;
            a.sum[f] += row.values[feature_cols[f]];
            a.cnt[f] += 1;
        }
    }

    std::vector<const cohort::Patient*> included;
    for (const auto& p : cohort.patients) {
        bool any = false;
        for (int tp = 0; tp < cohort::Timepoint::kCount && !any; ++tp)
            if (acc.count({p.id, tp})) any = true;
        if (any) included.push_back(&p);
    }
    if (included.empty()) throw ValidationError("build_joint_data: no patients with observations");

    data.demographics.resize(static_cast<Eigen::Index>(included.size()),
                             static_cast<Eigen::Index>(dem_idx.size()));
    data.arm.resize(static_cast<Eigen::Index>(included.size()));
    data.survival_time.resize(static_cast<Eigen::Index>(included.size()));
    data.event.resize(static_cast<Eigen::Index>(included.size()));
    for (std::size_t i = 0; i < included.size(); ++i) {
        const auto& p = *included[i];
        data.patient_ids.push_back(p.id);
        for (std::size_t d = 0; d < dem_idx.size(); ++d)
            data.demographics(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) =
                p.demographics.values[static_cast<std::size_t>(dem_idx[d])];
        data.arm[static_cast<Eigen::Index>(i)] = p.demographics.arm();
        data.survival_time[static_cast<Eigen::Index>(i)] = p.outcome.time_days;
        data.event[static_cast<Eigen::Index>(i)] = p.outcome.event;
        for (int tp = 0; tp < cohort::Timepoint::kCount; ++tp) {
            auto it = acc.find({p.id, tp});
            if (it == acc.end()) continue;
            for (std::size_t f = 0; f < features.size(); ++f) {
                if (it->second.cnt[f] == 0) continue;
                double v = it->second.sum[f] / static_cast<double>(it->second.cnt[f]);
                if (features[f].log_transform) {
                    if (!(v > 0.0))
                        throw ValidationError("feature '" + features[f].name +
                                              "' must be strictly positive for a log transform "
                                              "(patient " + p.id + ")");
                    v = std::log(v);
                }
                data.observations.push_back(
                    {i, f, cohort::Timepoint::from_index(tp).days(), v});
            }
        }
    }
    return data;
}

namespace {

double log1pexp(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

// Streaming accumulators for the pointwise fit metrics.
struct UnitAccumulator {
    std::size_t count = 0;
    double mean = 0.0, m2 = 0.0;              // Welford over log-likelihoods
    double lse_max = -1e300, lse_sum = 0.0;   // logsumexp of ll
    double lsen_max = -1e300, lsen_sum = 0.0; // logsumexp of -ll

    void add(double ll) {
        ++count;
        double delta = ll - mean;
        mean += delta / static_cast<double>(count);
        m2 += delta * (ll - mean);
        push(lse_max, lse_sum, ll);
        push(lsen_max, lsen_sum, -ll);
    }
    static void push(double& mx, double& sum, double v) {
        if (v > mx) {
            sum = sum * std::exp(mx - v) + 1.0;
            mx = v;
        } else {
            sum += std::exp(v - mx);
        }
    }
    double logsumexp() const { return lse_max + std::log(lse_sum); }
    double logsumexp_neg() const { return lsen_max + std::log(lsen_sum); }
    double variance() const { return count > 1 ? m2 / static_cast<double>(count - 1) : 0.0; }
};

struct Sampler {
    const JointModelData& data;
    const McmcConfig& cfg;
    std::size_t n, L, D, q;

    SplineBasis basis;

    // longitudinal design rows cached per observation
    std::vector<Eigen::VectorXd> obs_row;
    std::vector<std::vector<std::size_t>> obs_of_feature;   // feature -> obs indices
    std::vector<std::vector<std::size_t>> obs_of_patient;   // patient -> obs indices
    std::vector<Eigen::MatrixXd> xtx;                       // per feature

    // survival person-periods
    std::size_t n_periods = 0;
    std::vector<std::size_t> period_patient;
    std::vector<double> period_time;
    std::vector<int> period_event;
    Eigen::MatrixXd w_base;  // periods x p_base: [1, dems, arm, ns1, ns2]
    std::size_t p_base = 0, p_h = 0;
    std::vector<Eigen::VectorXd> period_row;  // longitudinal design row at period time

    // state
    std::vector<Eigen::VectorXd> beta;  // per feature, q
    Eigen::MatrixXd b;                  // n x L
    Eigen::VectorXd sigma2;             // L
    Eigen::MatrixXd sigma_re;           // L x L
    Eigen::VectorXd phi;                // survival params (p_h)
    Eigen::MatrixXd yhat;               // periods x L
    Eigen::VectorXd lp;                 // periods

    explicit Sampler(const JointModelData& d, const McmcConfig& c)
        : data(d), cfg(c), n(d.n()), L(d.n_features()), D(d.demographic_names.size()),
          q(D + 6) {
        if (data.observations.empty())
            throw ValidationError("fit_joint_mcmc: no longitudinal observations");
        std::vector<char> has_obs(n, 0);
        for (const auto& o : data.observations) has_obs[o.patient] = 1;
        for (std::size_t i = 0; i < n; ++i)
            if (!has_obs[i])
                throw ValidationError("fit_joint_mcmc: patient " + data.patient_ids[i] +
                                      " has no longitudinal observation");

        std::vector<double> times;
        for (const auto& o : data.observations) times.push_back(o.time_days);
        basis = natural_spline_basis(times, 2);

        obs_of_feature.resize(L);
        obs_of_patient.resize(n);
        obs_row.reserve(data.observations.size());
        for (std::size_t k = 0; k < data.observations.size(); ++k) {
            const auto& o = data.observations[k];
            obs_row.push_back(design_row(o.patient, o.time_days));
            obs_of_feature[o.feature].push_back(k);
            obs_of_patient[o.patient].push_back(k);
        }
        xtx.resize(L);
        for (std::size_t l = 0; l < L; ++l) {
            xtx[l] = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(q),
                                           static_cast<Eigen::Index>(q));
            for (std::size_t k : obs_of_feature[l])
                xtx[l].noalias() += obs_row[k] * obs_row[k].transpose();
        }

        if (cfg.survival_component) build_periods();
    }

    Eigen::VectorXd design_row(std::size_t patient, double t) const {
        Eigen::VectorXd row(static_cast<Eigen::Index>(q));
        row[0] = 1.0;
        for (std::size_t d = 0; d < D; ++d)
            row[static_cast<Eigen::Index>(1 + d)] =
                data.demographics(static_cast<Eigen::Index>(patient),
                                  static_cast<Eigen::Index>(d));
        double n1 = basis.eval(0, t), n2 = basis.eval(1, t);
        double arm = data.arm[static_cast<Eigen::Index>(patient)];
        row[static_cast<Eigen::Index>(1 + D)] = n1;
        row[static_cast<Eigen::Index>(2 + D)] = n2;
        row[static_cast<Eigen::Index>(3 + D)] = arm;
        row[static_cast<Eigen::Index>(4 + D)] = arm * n1;
        row[static_cast<Eigen::Index>(5 + D)] = arm * n2;
        return row;
    }

    // Discrete-time person-period grid: the scan schedule extended by
    // whole intervals until every follow-up time is covered.
    void build_periods() {
        const double step = data.scan_interval_days;
        for (std::size_t i = 0; i < n; ++i) {
            double t = data.survival_time[static_cast<Eigen::Index>(i)];
            int last = std::max(1, static_cast<int>(std::ceil(t / step - 1e-12)));
            for (int j = 1; j <= last; ++j) {
                period_patient.push_back(i);
                period_time.push_back(step * j);
                period_event.push_back(j == last ? data.event[static_cast<Eigen::Index>(i)] : 0);
            }
        }
        n_periods = period_patient.size();
        p_base = 1 + D + 1 + 2;
        p_h = p_base + L;

        Eigen::VectorXd dem_mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(D));
        Eigen::VectorXd dem_sd = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(D));
        if (cfg.standardize_survival_covariates && D > 0) {
            dem_mean = data.demographics.colwise().mean();
            for (std::size_t d = 0; d < D; ++d) {
                Eigen::VectorXd c = data.demographics.col(static_cast<Eigen::Index>(d)).array() -
                                    dem_mean[static_cast<Eigen::Index>(d)];
                double sd = std::sqrt(c.squaredNorm() / static_cast<double>(n));
                dem_sd[static_cast<Eigen::Index>(d)] = sd > 0 ? sd : 1.0;
            }
        }

        w_base.resize(static_cast<Eigen::Index>(n_periods), static_cast<Eigen::Index>(p_base));
        period_row.reserve(n_periods);
        for (std::size_t r = 0; r < n_periods; ++r) {
            std::size_t i = period_patient[r];
            double t = period_time[r];
            auto row = static_cast<Eigen::Index>(r);
            w_base(row, 0) = 1.0;
            for (std::size_t d = 0; d < D; ++d)
                w_base(row, static_cast<Eigen::Index>(1 + d)) =
                    (data.demographics(static_cast<Eigen::Index>(i),
                                       static_cast<Eigen::Index>(d)) -
                     dem_mean[static_cast<Eigen::Index>(d)]) /
                    dem_sd[static_cast<Eigen::Index>(d)];
            w_base(row, static_cast<Eigen::Index>(1 + D)) =
                data.arm[static_cast<Eigen::Index>(i)];
            w_base(row, static_cast<Eigen::Index>(2 + D)) = basis.eval(0, t);
            w_base(row, static_cast<Eigen::Index>(3 + D)) = basis.eval(1, t);
            period_row.push_back(design_row(i, t));
        }
    }

    void refresh_yhat_and_lp() {
        if (!cfg.survival_component) return;
        for (std::size_t r = 0; r < n_periods; ++r) {
            auto row = static_cast<Eigen::Index>(r);
            std::size_t i = period_patient[r];
            for (std::size_t l = 0; l < L; ++l)
                yhat(row, static_cast<Eigen::Index>(l)) =
                    period_row[r].dot(beta[l]) +
                    b(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l));
        }
        lp = w_base * phi.head(static_cast<Eigen::Index>(p_base));
        for (std::size_t l = 0; l < L; ++l)
            lp.noalias() += phi[static_cast<Eigen::Index>(p_base + l)] *
                            yhat.col(static_cast<Eigen::Index>(l));
    }

    double survival_loglik_from_lp(const Eigen::VectorXd& lin) const {
        double ll = 0.0;
        for (std::size_t r = 0; r < n_periods; ++r) {
            auto row = static_cast<Eigen::Index>(r);
            ll += period_event[r] * lin[row] - log1pexp(lin[row]);
        }
        return ll;
    }

    // log-likelihood of every observation unit at the given state; units are
    // longitudinal observations first, then survival person-periods
    void unit_logliks(const std::vector<Eigen::VectorXd>& beta_s, const Eigen::MatrixXd& b_s,
                      const Eigen::VectorXd& sigma2_s, const Eigen::VectorXd& phi_s,
                      std::vector<double>& out) const {
        const std::size_t n_obs = data.observations.size();
        out.resize(n_obs + (cfg.survival_component ? n_periods : 0));
        for (std::size_t k = 0; k < n_obs; ++k) {
            const auto& o = data.observations[k];
            double mu = obs_row[k].dot(beta_s[o.feature]) +
                        b_s(static_cast<Eigen::Index>(o.patient),
                            static_cast<Eigen::Index>(o.feature));
            double s2 = sigma2_s[static_cast<Eigen::Index>(o.feature)];
            double r = o.value - mu;
            out[k] = -0.5 * std::log(2.0 * M_PI * s2) - 0.5 * r * r / s2;
        }
        if (!cfg.survival_component) return;
        for (std::size_t r = 0; r < n_periods; ++r) {
            auto row = static_cast<Eigen::Index>(r);
            std::size_t i = period_patient[r];
            double lin = w_base.row(row).dot(phi_s.head(static_cast<Eigen::Index>(p_base)));
            for (std::size_t l = 0; l < L; ++l) {
                double yh = period_row[r].dot(beta_s[l]) +
                            b_s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l));
                lin += phi_s[static_cast<Eigen::Index>(p_base + l)] * yh;
            }
            out[n_obs + r] = period_event[r] * lin - log1pexp(lin);
        }
    }
};

Eigen::VectorXd draw_mvn_from_precision(Rng& rng, const Eigen::MatrixXd& precision,
                                        const Eigen::VectorXd& rhs) {
    Eigen::LLT<Eigen::MatrixXd> llt(precision);
    if (llt.info() != Eigen::Success)
        throw NumericalError("joint model: non-positive-definite conditional precision");
    Eigen::VectorXd mean = llt.solve(rhs);
    Eigen::VectorXd z(rhs.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    // precision = L L^T  =>  covariance chol factor is L^{-T}
    Eigen::VectorXd noise = llt.matrixU().solve(z);
    return mean + noise;
}

}  // namespace

JointModelFit fit_joint_mcmc(const JointModelData& data, const McmcConfig& cfg) {
    if (cfg.iterations <= cfg.burn_in)
        throw ValidationError("fit_joint_mcmc: iterations must exceed burn_in");
    if (cfg.thin < 1) throw ValidationError("fit_joint_mcmc: thin must be >= 1");

    Sampler s(data, cfg);
    const std::size_t n = s.n, L = s.L, D = s.D, q = s.q;
    Rng rng = Rng::substream(cfg.seed, "jointmodel-chain");

    // --- initial state -----------------------------------------------------
    s.beta.assign(L, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(q)));
    s.sigma2 = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(L));
    for (std::size_t l = 0; l < L; ++l) {
        Eigen::MatrixXd a = s.xtx[l] + Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(q),
                                                                 static_cast<Eigen::Index>(q));
        Eigen::VectorXd xty = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(q));
        double ssy = 0.0;
        for (std::size_t k : s.obs_of_feature[l]) {
            xty.noalias() += s.obs_row[k] * data.observations[k].value;
            ssy += data.observations[k].value * data.observations[k].value;
        }
        s.beta[l] = a.ldlt().solve(xty);
        double m = static_cast<double>(s.obs_of_feature[l].size());
        double rss = ssy - s.beta[l].dot(xty);
        s.sigma2[static_cast<Eigen::Index>(l)] = std::max(rss / std::max(m, 1.0), 1e-4);
    }
    s.b = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(L));
    s.sigma_re = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(L),
                                           static_cast<Eigen::Index>(L));
    if (cfg.survival_component) {
        s.phi = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(s.p_h));
        double events = 0.0;
        for (int e : s.period_event) events += e;
        double rate = std::clamp(events / static_cast<double>(s.n_periods), 1e-3, 1.0 - 1e-3);
        s.phi[0] = std::log(rate / (1.0 - rate));
        s.yhat.resize(static_cast<Eigen::Index>(s.n_periods), static_cast<Eigen::Index>(L));
    } else {
        s.phi.resize(0);
    }

    // --- parameter naming ---------------------------------------------------
    JointModelFit fit;
    fit.config = cfg;
    fit.features = data.features;
    fit.n_patients = n;
    auto long_param_names = [&](std::size_t l) {
        std::vector<std::string> names;
        const std::string f = data.features[l].name;
        names.push_back(f + ":Intercept");
        for (const auto& d : data.demographic_names) names.push_back(f + ":" + d);
        names.push_back(f + ":ns1");
        names.push_back(f + ":ns2");
        names.push_back(f + ":ARM");
        names.push_back(f + ":ARM.ns1");
        names.push_back(f + ":ARM.ns2");
        return names;
    };
    for (std::size_t l = 0; l < L; ++l) {
        for (const auto& nm : long_param_names(l)) fit.parameter_names.push_back(nm);
        fit.parameter_names.push_back(data.features[l].name + ":sigma2");
    }
    for (std::size_t a = 0; a < L; ++a)
        for (std::size_t bidx = a; bidx < L; ++bidx)
            fit.parameter_names.push_back("Sigma[" + std::to_string(a) + "," +
                                          std::to_string(bidx) + "]");
    if (cfg.survival_component) {
        fit.parameter_names.push_back("h:Intercept");
        for (const auto& d : data.demographic_names) fit.parameter_names.push_back("h:" + d);
        fit.parameter_names.push_back("h:ARM");
        fit.parameter_names.push_back("h:ns1");
        fit.parameter_names.push_back("h:ns2");
        for (std::size_t l = 0; l < L; ++l)
            fit.parameter_names.push_back("assoc:" + data.features[l].name);
    }
    const std::size_t n_params = fit.parameter_names.size();
    const std::size_t n_draws =
        static_cast<std::size_t>((cfg.iterations - cfg.burn_in) / cfg.thin);
    fit.draws.resize(static_cast<Eigen::Index>(n_draws), static_cast<Eigen::Index>(n_params));

    auto pack_state = [&](Eigen::VectorXd& out) {
        out.resize(static_cast<Eigen::Index>(n_params));
        Eigen::Index c = 0;
        for (std::size_t l = 0; l < L; ++l) {
            for (std::size_t j = 0; j < q; ++j) out[c++] = s.beta[l][static_cast<Eigen::Index>(j)];
            out[c++] = s.sigma2[static_cast<Eigen::Index>(l)];
        }
        for (std::size_t a = 0; a < L; ++a)
            for (std::size_t bidx = a; bidx < L; ++bidx)
                out[c++] = s.sigma_re(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(bidx));
        if (cfg.survival_component)
            for (std::size_t j = 0; j < s.p_h; ++j) out[c++] = s.phi[static_cast<Eigen::Index>(j)];
    };

    // --- MH bookkeeping ------------------------------------------------------
    std::vector<double> mh_step(cfg.survival_component ? s.p_h : 0, 0.1);
    std::vector<int> mh_accept_batch(mh_step.size(), 0), mh_total_batch(mh_step.size(), 0);
    std::vector<long> mh_accept_post(mh_step.size(), 0), mh_total_post(mh_step.size(), 0);
    int batch_number = 1;

    const double prior_prec_fixed = 1.0 / (cfg.prior_sd_fixed * cfg.prior_sd_fixed);
    const double iw_dof = static_cast<double>(L) + 2.0;

    // streaming metric state
    std::vector<UnitAccumulator> units;
    double sum_deviance = 0.0;
    Eigen::VectorXd param_mean;
    std::vector<Eigen::VectorXd> beta_mean(L, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(q)));
    Eigen::MatrixXd b_mean_acc = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n),
                                                       static_cast<Eigen::Index>(L));
    Eigen::VectorXd sigma2_mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(L));
    Eigen::VectorXd phi_mean =
        Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cfg.survival_component ? s.p_h : 0));
    std::size_t stored = 0;
    std::vector<double> lls;

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        // (1) longitudinal fixed effects: Gaussian conditional
        for (std::size_t l = 0; l < L; ++l) {
            double s2 = s.sigma2[static_cast<Eigen::Index>(l)];
            Eigen::MatrixXd precision =
                s.xtx[l] / s2 + prior_prec_fixed * Eigen::MatrixXd::Identity(
                                    static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(q));
            Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(q));
            for (std::size_t k : s.obs_of_feature[l]) {
                const auto& o = data.observations[k];
                double resid = o.value - s.b(static_cast<Eigen::Index>(o.patient),
                                             static_cast<Eigen::Index>(l));
                rhs.noalias() += s.obs_row[k] * resid;
            }
            rhs /= s2;
            s.beta[l] = draw_mvn_from_precision(rng, precision, rhs);
        }

        // (2) random effects: Gaussian conditional per patient
        Eigen::MatrixXd sigma_re_inv;
        {
            Eigen::LLT<Eigen::MatrixXd> llt(s.sigma_re);
            if (llt.info() != Eigen::Success)
                throw NumericalError("joint model: random-effect covariance lost definiteness");
            sigma_re_inv = llt.solve(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(L),
                                                               static_cast<Eigen::Index>(L)));
        }
        for (std::size_t i = 0; i < n; ++i) {
            Eigen::MatrixXd precision = sigma_re_inv;
            Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(L));
            for (std::size_t k : s.obs_of_patient[i]) {
                const auto& o = data.observations[k];
                double s2 = s.sigma2[static_cast<Eigen::Index>(o.feature)];
                double resid = o.value - s.obs_row[k].dot(s.beta[o.feature]);
                precision(static_cast<Eigen::Index>(o.feature),
                          static_cast<Eigen::Index>(o.feature)) += 1.0 / s2;
                rhs[static_cast<Eigen::Index>(o.feature)] += resid / s2;
            }
            s.b.row(static_cast<Eigen::Index>(i)) =
                draw_mvn_from_precision(rng, precision, rhs).transpose();
        }

        // (3) random-effect covariance: conjugate inverse-Wishart
        {
            Eigen::MatrixXd scale = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(L),
                                                              static_cast<Eigen::Index>(L));
            scale.noalias() += s.b.transpose() * s.b;
            scale = 0.5 * (scale + scale.transpose()).eval();
            double dof = iw_dof + static_cast<double>(n);
            Eigen::LLT<Eigen::MatrixXd> llt_scale(scale);
            Eigen::MatrixXd scale_inv = llt_scale.solve(Eigen::MatrixXd::Identity(
                static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(L)));
            Eigen::LLT<Eigen::MatrixXd> llt_inv(
                0.5 * (scale_inv + scale_inv.transpose()));
            Eigen::MatrixXd lp_chol = llt_inv.matrixL();
            // Bartlett factor
            Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(L),
                                                      static_cast<Eigen::Index>(L));
            for (std::size_t i = 0; i < L; ++i) {
                a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) =
                    std::sqrt(rng.chi_squared(dof - static_cast<double>(i)));
                for (std::size_t j = 0; j < i; ++j)
                    a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rng.normal();
            }
            Eigen::MatrixXd m = lp_chol * a;  // precision = m m^T ~ Wishart(dof, scale^{-1})
            Eigen::MatrixXd precision = m * m.transpose();
            Eigen::LLT<Eigen::MatrixXd> llt_prec(precision);
            if (llt_prec.info() != Eigen::Success) {
                // singular proposal: reject, keep the previous covariance draw
            } else {
                s.sigma_re = llt_prec.solve(Eigen::MatrixXd::Identity(
                    static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(L)));
                s.sigma_re = 0.5 * (s.sigma_re + s.sigma_re.transpose());
            }
        }

        // (4) noise variances: conjugate inverse-gamma
        for (std::size_t l = 0; l < L; ++l) {
            double ssr = 0.0;
            for (std::size_t k : s.obs_of_feature[l]) {
                const auto& o = data.observations[k];
                double r = o.value - s.obs_row[k].dot(s.beta[l]) -
                           s.b(static_cast<Eigen::Index>(o.patient), static_cast<Eigen::Index>(l));
                ssr += r * r;
            }
            double shape = cfg.prior_sigma2_shape +
                           0.5 * static_cast<double>(s.obs_of_feature[l].size());
            double rate = cfg.prior_sigma2_rate + 0.5 * ssr;
            s.sigma2[static_cast<Eigen::Index>(l)] = rng.inverse_gamma(shape, rate);
        }

        // (5) survival + association coefficients: random-walk Metropolis with
        // current-value association; adaptive steps during burn-in only
        if (cfg.survival_component) {
            s.refresh_yhat_and_lp();
            double cur_ll = s.survival_loglik_from_lp(s.lp);
            for (std::size_t k = 0; k < s.p_h; ++k) {
                auto kk = static_cast<Eigen::Index>(k);
                double delta = mh_step[k] * rng.normal();
                double new_ll = 0.0;
                // incremental linear predictor change along this column
                if (k < s.p_base) {
                    for (std::size_t r = 0; r < s.n_periods; ++r) {
                        double lr = s.lp[static_cast<Eigen::Index>(r)] +
                                    delta * s.w_base(static_cast<Eigen::Index>(r), kk);
                        new_ll += s.period_event[r] * lr - log1pexp(lr);
                    }
                } else {
                    auto col = static_cast<Eigen::Index>(k - s.p_base);
                    for (std::size_t r = 0; r < s.n_periods; ++r) {
                        double lr = s.lp[static_cast<Eigen::Index>(r)] +
                                    delta * s.yhat(static_cast<Eigen::Index>(r), col);
                        new_ll += s.period_event[r] * lr - log1pexp(lr);
                    }
                }
                double old_phi = s.phi[kk];
                double new_phi = old_phi + delta;
                double log_ratio = (new_ll - cur_ll) +
                                   0.5 * prior_prec_fixed * (old_phi * old_phi - new_phi * new_phi);
                bool accept = std::log(std::max(rng.uniform(), 1e-300)) < log_ratio;
                mh_total_batch[k] += 1;
                if (iter >= cfg.burn_in) mh_total_post[k] += 1;
                if (accept) {
                    s.phi[kk] = new_phi;
                    cur_ll = new_ll;
                    if (k < s.p_base)
                        s.lp.noalias() += delta * s.w_base.col(kk);
                    else
                        s.lp.noalias() +=
                            delta * s.yhat.col(static_cast<Eigen::Index>(k - s.p_base));
                    mh_accept_batch[k] += 1;
                    if (iter >= cfg.burn_in) mh_accept_post[k] += 1;
                }
            }
            if (iter < cfg.burn_in && (iter + 1) % cfg.adapt_batch == 0) {
                for (std::size_t k = 0; k < s.p_h; ++k) {
                    double rate = mh_total_batch[k]
                                      ? static_cast<double>(mh_accept_batch[k]) / mh_total_batch[k]
                                      : 0.0;
                    double adj = (rate - cfg.target_acceptance) / std::sqrt(
                                     static_cast<double>(batch_number));
                    mh_step[k] *= std::exp(std::clamp(adj, -1.0, 1.0));
                    mh_step[k] = std::clamp(mh_step[k], 1e-6, 50.0);
                    mh_accept_batch[k] = 0;
                    mh_total_batch[k] = 0;
                }
                ++batch_number;
            }
        }

        // divergence guard
        for (std::size_t l = 0; l < L; ++l)
            if (s.beta[l].cwiseAbs().maxCoeff() > cfg.divergence_limit)
                throw DivergenceError("fit_joint_mcmc: longitudinal coefficients diverged");
        if (cfg.survival_component && s.phi.size() > 0 &&
            s.phi.cwiseAbs().maxCoeff() > cfg.divergence_limit)
            throw DivergenceError("fit_joint_mcmc: survival coefficients diverged");

        // store draw
        if (iter >= cfg.burn_in && (iter - cfg.burn_in) % cfg.thin == 0 && stored < n_draws) {
            Eigen::VectorXd state;
            pack_state(state);
            fit.draws.row(static_cast<Eigen::Index>(stored)) = state.transpose();

            s.unit_logliks(s.beta, s.b, s.sigma2, s.phi, lls);
            if (units.empty()) units.resize(lls.size());
            double dev = 0.0;
            for (std::size_t u = 0; u < lls.size(); ++u) {
                units[u].add(lls[u]);
                dev += lls[u];
            }
            sum_deviance += -2.0 * dev;

            for (std::size_t l = 0; l < L; ++l) beta_mean[l] += s.beta[l];
            b_mean_acc += s.b;
            sigma2_mean += s.sigma2;
            if (cfg.survival_component) phi_mean += s.phi;
            ++stored;
        }
    }

    if (stored != n_draws)
        throw NumericalError("fit_joint_mcmc: internal draw bookkeeping error");

    // posterior-mean deviance for DIC
    for (std::size_t l = 0; l < L; ++l) beta_mean[l] /= static_cast<double>(stored);
    b_mean_acc /= static_cast<double>(stored);
    sigma2_mean /= static_cast<double>(stored);
    if (cfg.survival_component) phi_mean /= static_cast<double>(stored);
    fit.random_effect_mean = b_mean_acc;
    fit.mean_deviance = sum_deviance / static_cast<double>(stored);
    s.unit_logliks(beta_mean, b_mean_acc, sigma2_mean, phi_mean, lls);
    fit.deviance_at_mean = -2.0 * std::accumulate(lls.begin(), lls.end(), 0.0);

    const double log_draws = std::log(static_cast<double>(stored));
    fit.lppd = 0.0;
    fit.p_waic = 0.0;
    fit.lpml = 0.0;
    for (const auto& u : units) {
        fit.lppd += u.logsumexp() - log_draws;
        fit.p_waic += u.variance();
        double log_cpo = log_draws - u.logsumexp_neg();
        if (!std::isfinite(log_cpo)) fit.lpml_degenerate = true;
        fit.lpml += log_cpo;
    }

    if (cfg.survival_component) {
        fit.survival_acceptance.resize(s.p_h);
        for (std::size_t k = 0; k < s.p_h; ++k)
            fit.survival_acceptance[k] =
                mh_total_post[k] ? static_cast<double>(mh_accept_post[k]) / mh_total_post[k] : 0.0;
    }
    return fit;
}

Eigen::VectorXd JointModelFit::column(const std::string& parameter) const {
    for (std::size_t i = 0; i < parameter_names.size(); ++i)
        if (parameter_names[i] == parameter) return draws.col(static_cast<Eigen::Index>(i));
    throw ValidationError("unknown parameter '" + parameter + "'");
}

std::vector<ParameterSummary> summarize_fit(const JointModelFit& fit) {
    if (fit.draw_count() < 100)
        throw ValidationError("summarize_fit: need at least 100 stored draws");
    std::vector<ParameterSummary> out;
    const double m = static_cast<double>(fit.draw_count());
    for (std::size_t j = 0; j < fit.parameter_names.size(); ++j) {
        Eigen::VectorXd col = fit.draws.col(static_cast<Eigen::Index>(j));
        ParameterSummary ps;
        ps.name = fit.parameter_names[j];
        ps.mean = col.mean();
        ps.sd = std::sqrt((col.array() - ps.mean).square().sum() / (m - 1.0));
        std::vector<double> sorted(col.data(), col.data() + col.size());
        std::sort(sorted.begin(), sorted.end());
        ps.q2_5 = quantile_type7(sorted, 0.025);
        ps.q97_5 = quantile_type7(sorted, 0.975);
        double above = (col.array() > 0.0).count() / m;
        double below = (col.array() < 0.0).count() / m;
        ps.p = std::min(1.0, 2.0 * std::min(above, below));
        out.push_back(ps);
    }
    return out;
}

FitMetrics fit_metrics(const JointModelFit& fit) {
    FitMetrics m;
    m.p_d = fit.mean_deviance - fit.deviance_at_mean;
    m.dic = fit.mean_deviance + m.p_d;
    m.p_waic = fit.p_waic;
    m.waic = -2.0 * (fit.lppd - fit.p_waic);
    m.lpml = fit.lpml;
    return m;
}

std::vector<TraceDiagnostic> trace_diagnostics(const JointModelFit& fit) {
    const std::size_t m = fit.draw_count();
    if (m < 4) throw ValidationError("trace_diagnostics: need at least 4 stored draws");
    const std::size_t half = m / 2;
    std::vector<TraceDiagnostic> out;
    for (std::size_t j = 0; j < fit.parameter_names.size(); ++j) {
        Eigen::VectorXd col = fit.draws.col(static_cast<Eigen::Index>(j));
        TraceDiagnostic d;
        d.name = fit.parameter_names[j];

        Eigen::VectorXd c1 = col.head(static_cast<Eigen::Index>(half));
        Eigen::VectorXd c2 = col.segment(static_cast<Eigen::Index>(half),
                                         static_cast<Eigen::Index>(half));
        double m1 = c1.mean(), m2 = c2.mean();
        double v1 = (c1.array() - m1).square().sum() / (half - 1.0);
        double v2 = (c2.array() - m2).square().sum() / (half - 1.0);
        double w = 0.5 * (v1 + v2);
        double grand = 0.5 * (m1 + m2);
        double b_over_n = ((m1 - grand) * (m1 - grand) + (m2 - grand) * (m2 - grand));  // m=2
        if (w <= 0.0) {
            d.degenerate = true;
            d.split_rhat = std::numeric_limits<double>::quiet_NaN();
            d.ess = std::numeric_limits<double>::quiet_NaN();
            out.push_back(d);
            continue;
        }
        double hn = static_cast<double>(half);
        double var_plus = (hn - 1.0) / hn * w + b_over_n;
        d.split_rhat = std::sqrt(var_plus / w);

        // Geyer initial-positive-sequence ESS over the two half chains
        std::size_t max_lag = half > 3 ? half - 2 : 1;
        max_lag = std::min<std::size_t>(max_lag, 1000);
        auto autocov = [&](const Eigen::VectorXd& c, double mean, std::size_t lag) {
            double acc = 0.0;
            for (std::size_t t = 0; t + lag < half; ++t)
                acc += (c[static_cast<Eigen::Index>(t)] - mean) *
                       (c[static_cast<Eigen::Index>(t + lag)] - mean);
            return acc / hn;
        };
        double rho_sum = 0.0;
        double prev_pair = std::numeric_limits<double>::infinity();
        for (std::size_t lag = 1; lag + 1 <= max_lag; lag += 2) {
            double rho_a = 1.0 - (w - 0.5 * (autocov(c1, m1, lag) + autocov(c2, m2, lag))) / var_plus;
            double rho_b = 1.0 -
                           (w - 0.5 * (autocov(c1, m1, lag + 1) + autocov(c2, m2, lag + 1))) /
                               var_plus;
            double pair = rho_a + rho_b;
            if (pair < 0.0) break;
            pair = std::min(pair, prev_pair);  // enforce monotone decrease
            rho_sum += pair;
            prev_pair = pair;
        }
        d.ess = 2.0 * hn / (1.0 + 2.0 * rho_sum);
        out.push_back(d);
    }
    return out;
}

namespace {

std::string sanitize_filename(const std::string& name) {
    std::string out;
    for (char c : name)
        out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-') ? c : '_';
    return out;
}

}  // namespace

void save_fit(const JointModelFit& fit, const std::string& dir_path) {
    fs::create_directories(dir_path);
    json manifest;
    manifest["parameters"] = fit.parameter_names;
    manifest["draws"] = fit.draw_count();
    manifest["iterations"] = fit.config.iterations;
    manifest["burn_in"] = fit.config.burn_in;
    manifest["thin"] = fit.config.thin;
    manifest["seed"] = fit.config.seed;
    manifest["draws_file"] = "draws.bin";
    manifest["layout"] = "row-major float64, rows = stored draws, columns = parameters";
    json feats = json::array();
    for (const auto& f : fit.features)
        feats.push_back({{"name", f.name}, {"log", f.log_transform}});
    manifest["features"] = feats;
    FitMetrics m = fit_metrics(fit);
    manifest["metrics"] = {{"dic", m.dic}, {"p_d", m.p_d}, {"waic", m.waic},
                           {"p_waic", m.p_waic}, {"lpml", m.lpml}};
    std::ofstream mf(fs::path(dir_path) / "fit.json", std::ios::binary);
    mf << manifest.dump(2) << "\n";

    std::ofstream raw(fs::path(dir_path) / "draws.bin", std::ios::binary);
    for (Eigen::Index r = 0; r < fit.draws.rows(); ++r)
        for (Eigen::Index c = 0; c < fit.draws.cols(); ++c) {
            double v = fit.draws(r, c);
            raw.write(reinterpret_cast<const char*>(&v), sizeof(double));
        }

    for (std::size_t j = 0; j < fit.parameter_names.size(); ++j) {
        CsvTable t(std::vector<std::string>{"draw", "value"});
        for (Eigen::Index r = 0; r < fit.draws.rows(); ++r)
            t.add_row({std::to_string(r), num17(fit.draws(r, static_cast<Eigen::Index>(j)))});
        t.write_file((fs::path(dir_path) /
                      ("trace_" + sanitize_filename(fit.parameter_names[j]) + ".csv"))
                         .string());
    }
}

std::string summary_to_csv(const std::vector<ParameterSummary>& summary) {
    CsvTable t(std::vector<std::string>{"parameter", "mean", "sd", "q2.5", "q97.5", "p"});
    for (const auto& ps : summary)
        t.add_row({ps.name, num17(ps.mean), num17(ps.sd), num17(ps.q2_5), num17(ps.q97_5),
                   num17(ps.p)});
    return t.to_string();
}

}  // namespace longrad::jointmodel
