#include "longrad/subset.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "longrad/csv.hpp"

namespace longrad::subset {

using survival::SurvivalData;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

SurvivalData subset_columns(const SurvivalData& data, const std::vector<std::size_t>& cols) {
    SurvivalData out;
    out.x.resize(data.x.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) {
        out.x.col(static_cast<Eigen::Index>(c)) = data.x.col(static_cast<Eigen::Index>(cols[c]));
        out.column_names.push_back(data.column_names.empty() ? std::to_string(cols[c])
                                                             : data.column_names[cols[c]]);
    }
    out.time = data.time;
    out.event = data.event;
    out.patient_ids = data.patient_ids;
    return out;
}

struct RefitOutcome {
    double deviance = kInf;
    Eigen::VectorXd theta;
    bool ok = false;
};

RefitOutcome refit(const SurvivalData& data, const std::vector<std::size_t>& cols) {
    RefitOutcome out;
    try {
        SurvivalData sub = subset_columns(data, cols);
        survival::CoxFit fit = survival::fit_cox(sub);
        out.deviance = 2.0 * static_cast<double>(data.n()) * fit.nll;
        out.theta = fit.theta;
        out.ok = true;
    } catch (const NumericalError&) {
        // collinear or separated subset: worst possible criterion
    }
    return out;
}

std::size_t binomial_capped(std::size_t n, std::size_t k, std::size_t cap) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    std::size_t result = 1;
    for (std::size_t i = 1; i <= k; ++i) {
        result = result * (n - k + i) / i;
        if (result > cap) return cap + 1;
    }
    return result;
}

}  // namespace

SubsetResult bess_select(const SurvivalData& data,
                         const std::vector<std::size_t>& candidate_columns,
                         const std::vector<std::size_t>& fixed_columns, std::size_t s,
                         const BessOptions& options) {
    const std::size_t p = candidate_columns.size();
    if (s < 1 || s > p)
        throw ValidationError("bess_select: subset size " + std::to_string(s) +
                              " outside [1, " + std::to_string(p) + "]");

    auto fit_subset = [&](const std::vector<std::size_t>& subset) {
        std::vector<std::size_t> cols = fixed_columns;
        for (std::size_t j : subset) cols.push_back(candidate_columns[j]);
        return std::make_pair(refit(data, cols), cols);
    };

    bool exhaustive;
    switch (options.mode) {
        case BessOptions::Mode::Exhaustive: exhaustive = true; break;
        case BessOptions::Mode::Splicing: exhaustive = false; break;
        default:
            exhaustive = binomial_capped(p, s, options.exhaustive_limit) <=
                         options.exhaustive_limit;
    }

    SubsetResult best;
    best.subset_size = s;
    best.deviance = kInf;

    if (exhaustive) {
        std::vector<std::size_t> subset(s);
        std::iota(subset.begin(), subset.end(), 0);
        for (;;) {
            auto [outcome, cols] = fit_subset(subset);
            if (outcome.ok && outcome.deviance < best.deviance - 0.0) {
                best.deviance = outcome.deviance;
                best.selected = subset;
                best.theta = outcome.theta;
                best.fit_columns = cols;
            }
            // next lexicographic combination
            std::size_t i = s;
            while (i > 0 && subset[i - 1] == p - s + i - 1) --i;
            if (i == 0) break;
            subset[i - 1] += 1;
            for (std::size_t j = i; j < s; ++j) subset[j] = subset[j - 1] + 1;
        }
        if (!std::isfinite(best.deviance))
            throw NumericalError("bess_select: every size-" + std::to_string(s) +
                                 " subset failed to fit");
        for (auto& j : best.selected) j = candidate_columns[j];
        std::sort(best.selected.begin(), best.selected.end());
        return best;
    }

    // splicing: sacrifice-guided exchanges, swap sets of size <= 2
    std::vector<std::size_t> all_cols = fixed_columns;
    for (std::size_t c : candidate_columns) all_cols.push_back(c);
    SurvivalData wide = subset_columns(data, all_cols);
    const std::size_t n_fixed = fixed_columns.size();

    // initial active set: largest gradient magnitudes at the fixed-only fit
    std::vector<std::size_t> active;
    {
        Eigen::VectorXd theta0 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(all_cols.size()));
        if (n_fixed > 0) {
            std::vector<std::size_t> fixed_local(n_fixed);
            std::iota(fixed_local.begin(), fixed_local.end(), 0);
            RefitOutcome base = refit(wide, fixed_local);
            if (base.ok)
                for (std::size_t j = 0; j < n_fixed; ++j)
                    theta0[static_cast<Eigen::Index>(j)] = base.theta[static_cast<Eigen::Index>(j)];
        }
        survival::CoxObjective obj = survival::cox_nll(wide, theta0);
        std::vector<std::size_t> order(p);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return std::fabs(obj.gradient[static_cast<Eigen::Index>(n_fixed + a)]) >
                   std::fabs(obj.gradient[static_cast<Eigen::Index>(n_fixed + b)]);
        });
        active.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(s));
        std::sort(active.begin(), active.end());
    }

    auto current = fit_subset(active);
    if (!current.first.ok) {
        // fall back to the first s candidates if screening picked a bad set
        std::iota(active.begin(), active.end(), 0);
        current = fit_subset(active);
    }
    double current_dev = current.first.ok ? current.first.deviance : kInf;

    for (int iter = 0; iter < options.max_splicing_iterations; ++iter) {
        // gradient and curvature at the padded current fit
        Eigen::VectorXd theta_full =
            Eigen::VectorXd::Zero(static_cast<Eigen::Index>(all_cols.size()));
        if (current.first.ok) {
            for (std::size_t j = 0; j < n_fixed; ++j)
                theta_full[static_cast<Eigen::Index>(j)] =
                    current.first.theta[static_cast<Eigen::Index>(j)];
            for (std::size_t j = 0; j < active.size(); ++j)
                theta_full[static_cast<Eigen::Index>(n_fixed + active[j])] =
                    current.first.theta[static_cast<Eigen::Index>(n_fixed + j)];
        }
        Eigen::MatrixXd hess;
        survival::CoxObjective obj = survival::cox_nll_with_hessian(wide, theta_full, hess);

        std::vector<std::size_t> inactive;
        for (std::size_t j = 0; j < p; ++j)
            if (std::find(active.begin(), active.end(), j) == active.end())
                inactive.push_back(j);

        auto idx_of = [&](std::size_t j) { return static_cast<Eigen::Index>(n_fixed + j); };
        // backward sacrifice: deviance rise when dropping an active feature
        std::vector<std::pair<double, std::size_t>> backward;
        for (std::size_t j : active) {
            double d = std::max(hess(idx_of(j), idx_of(j)), 1e-12);
            double t = theta_full[idx_of(j)];
            backward.push_back({0.5 * t * t * d, j});
        }
        // forward sacrifice: deviance drop when adding an inactive feature
        std::vector<std::pair<double, std::size_t>> forward;
        for (std::size_t j : inactive) {
            double d = std::max(hess(idx_of(j), idx_of(j)), 1e-12);
            double g = obj.gradient[idx_of(j)];
            forward.push_back({0.5 * g * g / d, j});
        }
        std::sort(backward.begin(), backward.end());
        std::sort(forward.begin(), forward.end(),
                  [](const auto& a, const auto& b) { return a.first > b.first; });

        bool improved = false;
        for (std::size_t k = 1; k <= 2 && !improved; ++k) {
            if (backward.size() < k || forward.size() < k) continue;
            std::vector<std::size_t> trial = active;
            for (std::size_t q = 0; q < k; ++q) {
                trial.erase(std::find(trial.begin(), trial.end(), backward[q].second));
                trial.push_back(forward[q].second);
            }
            std::sort(trial.begin(), trial.end());
            auto res = fit_subset(trial);
            if (res.first.ok && res.first.deviance < current_dev - options.improvement_tol) {
                active = trial;
                current = std::move(res);
                current_dev = current.first.deviance;
                improved = true;
            }
        }
        if (improved) continue;

        // no sacrifice-guided move helped: exhaustive best single swap
        double best_swap_dev = current_dev;
        std::vector<std::size_t> best_swap;
        for (std::size_t out_j : active)
            for (std::size_t in_j : inactive) {
                std::vector<std::size_t> trial = active;
                trial.erase(std::find(trial.begin(), trial.end(), out_j));
                trial.push_back(in_j);
                std::sort(trial.begin(), trial.end());
                auto res = fit_subset(trial);
                if (res.first.ok && res.first.deviance < best_swap_dev - options.improvement_tol) {
                    best_swap_dev = res.first.deviance;
                    best_swap = trial;
                }
            }
        if (best_swap.empty()) break;
        active = best_swap;
        current = fit_subset(active);
        current_dev = current.first.deviance;
    }

    if (!current.first.ok)
        throw NumericalError("bess_select: splicing failed to find a fittable subset");
    best.deviance = current_dev;
    best.theta = current.first.theta;
    best.fit_columns = current.second;
    best.selected.clear();
    for (std::size_t j : active) best.selected.push_back(candidate_columns[j]);
    std::sort(best.selected.begin(), best.selected.end());
    return best;
}

namespace {

std::vector<std::size_t> block_columns(const SurvivalData& data, const std::string& name) {
    const survival::BlockSpec* b = data.block(name);
    if (!b) return {};
    std::vector<std::size_t> cols(b->width);
    std::iota(cols.begin(), cols.end(), b->offset);
    return cols;
}

}  // namespace

SequentialSelection select_top4_sequential(const SurvivalData& data, std::size_t per_block,
                                           const BessOptions& options) {
    SequentialSelection out;
    std::vector<std::size_t> fixed = block_columns(data, "demographics");
    out.cumulative_columns = fixed;

    for (const std::string& block : {"x", "w8", "w16", "w24"}) {
        std::vector<std::size_t> candidates = block_columns(data, block);
        if (candidates.empty()) {
            out.warnings.push_back("block '" + block + "' absent; skipped");
            continue;
        }
        std::size_t s = std::min(per_block, candidates.size());
        SubsetResult res = bess_select(data, candidates, out.cumulative_columns, s, options);
        out.block_names.push_back(block);
        out.selected_per_block.push_back(res.selected);
        for (std::size_t c : res.selected) out.cumulative_columns.push_back(c);
    }
    return out;
}

namespace {

// strip the block prefix ("x:", "w8:", ...) so scores aggregate per feature
std::string base_feature_name(const std::string& column_name) {
    auto pos = column_name.find(':');
    return pos == std::string::npos ? column_name : column_name.substr(pos + 1);
}

}  // namespace

ImportanceTable vote_importance(const SurvivalData& data, int size_min, int size_max,
                                const BessOptions& options) {
    static const std::array<std::string, 4> kBlocks = {"x", "w8", "w16", "w24"};
    for (const auto& b : kBlocks)
        if (!data.block(b))
            throw ValidationError("vote_importance: all four timepoint blocks required, '" +
                                  std::string(b) + "' absent");
    std::vector<std::size_t> fixed = block_columns(data, "demographics");

    std::map<std::string, ImportanceRow> scores;
    ImportanceTable table;
    for (int s = size_min; s <= size_max; ++s) table.sizes.push_back(s);

    for (int tp = 0; tp < 4; ++tp) {
        std::vector<std::size_t> candidates = block_columns(data, kBlocks[tp]);
        for (int s : table.sizes) {
            if (static_cast<std::size_t>(s) > candidates.size()) continue;
            SubsetResult res =
                bess_select(data, candidates, fixed, static_cast<std::size_t>(s), options);
            for (std::size_t col : res.selected) {
                std::string feat = base_feature_name(data.column_names[col]);
                auto& row = scores.try_emplace(feat, ImportanceRow{feat, {0, 0, 0, 0}, 0}).first
                                ->second;
                row.per_timepoint[tp] += 1;
                row.total += 1;
            }
        }
    }

    for (auto& [name, row] : scores) table.rows.push_back(row);
    std::sort(table.rows.begin(), table.rows.end(), [](const ImportanceRow& a, const ImportanceRow& b) {
        if (a.total != b.total) return a.total > b.total;
        return a.feature < b.feature;
    });
    return table;
}

std::string importance_to_csv(const ImportanceTable& table) {
    CsvTable t(std::vector<std::string>{"feature", "timepoint", "score", "total"});
    static const std::array<std::string, 4> kLabels = {"Screening", "Week8", "Week16", "Week24"};
    for (const auto& row : table.rows)
        for (int tp = 0; tp < 4; ++tp)
            t.add_row({row.feature, kLabels[tp], std::to_string(row.per_timepoint[tp]),
                       std::to_string(row.total)});
    return t.to_string();
}

}  // namespace longrad::subset
