#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "longrad/survival.hpp"

namespace longrad::subset {

struct SubsetResult {
    std::size_t subset_size = 0;
    std::vector<std::size_t> selected;  // candidate-column indices, ascending
    Eigen::VectorXd theta;              // coefficients over fixed + selected columns
    std::vector<std::size_t> fit_columns;
    double deviance = 0.0;  // 2 n * nll of the refit
};

struct BessOptions {
    enum class Mode { Auto, Exhaustive, Splicing };
    Mode mode = Mode::Auto;
    // exhaustive enumeration when C(p, s) stays under this
    std::size_t exhaustive_limit = 50000;
    int max_splicing_iterations = 50;
    double improvement_tol = 1e-9;
};

// Best size-s subset of candidate columns by in-sample Cox deviance; fixed
// columns are always included unpenalised. Exhaustive search on small
// problems, otherwise splicing exchanges with swap sets of size <= 2.
SubsetResult bess_select(const survival::SurvivalData& data,
                         const std::vector<std::size_t>& candidate_columns,
                         const std::vector<std::size_t>& fixed_columns, std::size_t s,
                         const BessOptions& options = {});

struct SequentialSelection {
    // per timepoint block ("x", "w8", "w16", "w24"): selected global columns
    std::vector<std::string> block_names;
    std::vector<std::vector<std::size_t>> selected_per_block;
    std::vector<std::size_t> cumulative_columns;  // demographics + everything selected
    std::vector<std::string> warnings;
};

// Top 4 per timepoint, conditioning each step on demographics plus the
// features already selected at earlier timepoints.
SequentialSelection select_top4_sequential(const survival::SurvivalData& data,
                                           std::size_t per_block = 4,
                                           const BessOptions& options = {});

struct ImportanceRow {
    std::string feature;
    std::array<int, 4> per_timepoint{0, 0, 0, 0};
    int total = 0;
};

struct ImportanceTable {
    std::vector<ImportanceRow> rows;  // descending total, ties by name
    std::vector<int> sizes;
};

// Frequency-voting importance: every (timepoint, subset size) run gives each
// selected feature one point; demographics are never candidates.
ImportanceTable vote_importance(const survival::SurvivalData& data, int size_min = 2,
                                int size_max = 20, const BessOptions& options = {});

std::string importance_to_csv(const ImportanceTable& table);

}  // namespace longrad::subset
