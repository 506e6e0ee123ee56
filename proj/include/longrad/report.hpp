#pragma once

#include <string>
#include <vector>

#include "longrad/jointmodel.hpp"
#include "longrad/subset.hpp"
#include "longrad/survival.hpp"

namespace longrad::report {

enum class FigureKind { BoxByArm, CVPath, CIndexBars, ImportanceBars, Trace };

struct FigureSpec {
    FigureKind kind = FigureKind::BoxByArm;
    bool log_scale = false;
    std::string output_path;  // optional; empty renders in memory only
};

// Every figure is deterministic SVG text plus a companion CSV of the
// plotted series for machine comparison.
struct Figure {
    std::string svg;
    std::string csv;
};

void write_figure(const Figure& figure, const std::string& svg_path);

struct BoxCell {
    int arm = 0;        // 0 placebo, 1 ribociclib
    int timepoint = 0;  // 0..3
    std::vector<double> values;
};

struct BoxPlotInput {
    std::string feature_name;
    std::vector<BoxCell> cells;
};

// Median, quartile box, 1.5 IQR whiskers; arm 1 in orange, arm 0 in purple.
// Cells with fewer than 5 observations are omitted with an annotation.
Figure render_box_by_arm(const BoxPlotInput& input, const FigureSpec& spec);

// x = log(lambda), mean CV C-index with SE bars, nonzero counts on top,
// optimum marked.
Figure render_cvpath(const survival::LassoPath& path, const FigureSpec& spec = {});

Figure render_cindex_bars(const std::vector<survival::CIndexEstimate>& estimates,
                          const std::vector<std::string>& labels, const FigureSpec& spec = {});

Figure render_importance_bars(const subset::ImportanceTable& table, const FigureSpec& spec = {});

struct TraceSeries {
    std::string parameter;
    std::vector<double> values;     // stored draws in order
    int burn_in = 0;                // iterations discarded before storage
    int thin = 1;
};

Figure render_trace(const TraceSeries& series, const FigureSpec& spec = {});

std::vector<TraceSeries> trace_series_of(const jointmodel::JointModelFit& fit);

}  // namespace longrad::report
