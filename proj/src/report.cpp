#include "longrad/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "longrad/csv.hpp"

namespace longrad::report {

namespace {

constexpr double kWidth = 840.0, kHeight = 560.0;
constexpr double kMarginL = 70.0, kMarginR = 30.0, kMarginT = 50.0, kMarginB = 60.0;
const char* kOrange = "#e08214";  // ribociclib
const char* kPurple = "#7b3294";  // placebo

std::string fmt(double v) { return num_fixed(v, 3); }

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

struct SvgBuilder {
    std::ostringstream out;

    SvgBuilder() {
        out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
            << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << kWidth
            << "\" height=\"" << kHeight << "\" viewBox=\"0 0 " << kWidth << " " << kHeight
            << "\">\n";
        out << "<rect x=\"0\" y=\"0\" width=\"" << kWidth << "\" height=\"" << kHeight
            << "\" fill=\"white\"/>\n";
    }

    void line(double x1, double y1, double x2, double y2, const std::string& stroke,
              double width = 1.0) {
        out << "<line x1=\"" << fmt(x1) << "\" y1=\"" << fmt(y1) << "\" x2=\"" << fmt(x2)
            << "\" y2=\"" << fmt(y2) << "\" stroke=\"" << stroke << "\" stroke-width=\""
            << fmt(width) << "\"/>\n";
    }

    void rect(double x, double y, double w, double h, const std::string& fill,
              const std::string& stroke = "none", double opacity = 1.0) {
        out << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(w)
            << "\" height=\"" << fmt(h) << "\" fill=\"" << fill << "\" stroke=\"" << stroke
            << "\" fill-opacity=\"" << fmt(opacity) << "\"/>\n";
    }

    void circle(double x, double y, double r, const std::string& fill) {
        out << "<circle cx=\"" << fmt(x) << "\" cy=\"" << fmt(y) << "\" r=\"" << fmt(r)
            << "\" fill=\"" << fill << "\"/>\n";
    }

    void text(double x, double y, const std::string& s, double size = 12.0,
              const std::string& anchor = "middle", const std::string& fill = "#202020") {
        out << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" font-family=\"sans-serif\""
            << " font-size=\"" << fmt(size) << "\" text-anchor=\"" << anchor << "\" fill=\""
            << fill << "\">" << xml_escape(s) << "</text>\n";
    }

    void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
        out << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"1\" points=\"";
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (i) out << ' ';
            out << fmt(pts[i].first) << ',' << fmt(pts[i].second);
        }
        out << "\"/>\n";
    }

    std::string finish() {
        out << "</svg>\n";
        return out.str();
    }
};

struct LinearScale {
    double lo = 0.0, hi = 1.0, pix_lo = 0.0, pix_hi = 1.0;
    double operator()(double v) const {
        double t = (v - lo) / (hi - lo);
        return pix_lo + t * (pix_hi - pix_lo);
    }
};

LinearScale y_scale(double lo, double hi) {
    if (hi <= lo) hi = lo + 1.0;
    double pad = 0.06 * (hi - lo);
    return {lo - pad, hi + pad, kHeight - kMarginB, kMarginT};
}

LinearScale x_scale(double lo, double hi) {
    if (hi <= lo) hi = lo + 1.0;
    double pad = 0.04 * (hi - lo);
    return {lo - pad, hi + pad, kMarginL, kWidth - kMarginR};
}

void draw_axes(SvgBuilder& svg) {
    svg.line(kMarginL, kMarginT, kMarginL, kHeight - kMarginB, "#404040");
    svg.line(kMarginL, kHeight - kMarginB, kWidth - kMarginR, kHeight - kMarginB, "#404040");
}

void y_ticks(SvgBuilder& svg, const LinearScale& ys, int n = 6) {
    for (int i = 0; i <= n; ++i) {
        double v = ys.lo + (ys.hi - ys.lo) * i / n;
        double y = ys(v);
        svg.line(kMarginL - 4, y, kMarginL, y, "#404040");
        svg.text(kMarginL - 8, y + 4, num_fixed(v, 3), 10, "end");
    }
}

}  // namespace

void write_figure(const Figure& figure, const std::string& svg_path) {
    std::ofstream out(svg_path, std::ios::binary);
    if (!out) throw Error("cannot write figure: " + svg_path);
    out << figure.svg;
    std::string csv_path = svg_path;
    auto dot = csv_path.rfind(".svg");
    if (dot != std::string::npos) csv_path = csv_path.substr(0, dot);
    csv_path += ".csv";
    std::ofstream csv(csv_path, std::ios::binary);
    if (!csv) throw Error("cannot write figure data: " + csv_path);
    csv << figure.csv;
}

Figure render_box_by_arm(const BoxPlotInput& input, const FigureSpec& spec) {
    static const std::array<std::string, 4> kTp = {"Screening", "Week8", "Week16", "Week24"};
    struct CellStats {
        int arm, tp;
        double median, q1, q3, lo_whisker, hi_whisker;
        std::size_t n;
        bool omitted;
    };
    std::vector<CellStats> stats;
    double vmin = 1e300, vmax = -1e300;
    for (const auto& cell : input.cells) {
        CellStats cs{};
        cs.arm = cell.arm;
        cs.tp = cell.timepoint;
        cs.n = cell.values.size();
        if (cell.values.size() < 5) {
            cs.omitted = true;
            stats.push_back(cs);
            continue;
        }
        std::vector<double> v = cell.values;
        if (spec.log_scale) {
            for (auto& x : v) {
                if (!(x > 0.0))
                    throw ValidationError("render_box_by_arm: log scale with non-positive value");
                x = std::log10(x);
            }
        }
        std::sort(v.begin(), v.end());
        cs.median = quantile_type7(v, 0.5);
        cs.q1 = quantile_type7(v, 0.25);
        cs.q3 = quantile_type7(v, 0.75);
        double iqr = cs.q3 - cs.q1;
        double lo_fence = cs.q1 - 1.5 * iqr, hi_fence = cs.q3 + 1.5 * iqr;
        cs.lo_whisker = v.front();
        cs.hi_whisker = v.back();
        for (double x : v)
            if (x >= lo_fence) {
                cs.lo_whisker = x;
                break;
            }
        for (auto it = v.rbegin(); it != v.rend(); ++it)
            if (*it <= hi_fence) {
                cs.hi_whisker = *it;
                break;
            }
        vmin = std::min(vmin, cs.lo_whisker);
        vmax = std::max(vmax, cs.hi_whisker);
        cs.omitted = false;
        stats.push_back(cs);
    }
    if (vmin > vmax) {
        vmin = 0.0;
        vmax = 1.0;
    }

    SvgBuilder svg;
    LinearScale ys = y_scale(vmin, vmax);
    draw_axes(svg);
    y_ticks(svg, ys);
    svg.text(kWidth / 2, kMarginT - 26,
             input.feature_name + (spec.log_scale ? " (log10)" : ""), 15);

    const double group_w = (kWidth - kMarginL - kMarginR) / 4.0;
    const double box_w = group_w * 0.28;
    for (const auto& cs : stats) {
        double cx = kMarginL + group_w * (cs.tp + 0.5) + (cs.arm == 1 ? -0.6 : 0.6) * box_w;
        const char* color = cs.arm == 1 ? kOrange : kPurple;
        if (cs.omitted) {
            svg.text(cx, kHeight - kMarginB - 8, "n<5", 9, "middle", "#888888");
            continue;
        }
        svg.line(cx, ys(cs.lo_whisker), cx, ys(cs.q1), color);
        svg.line(cx, ys(cs.q3), cx, ys(cs.hi_whisker), color);
        svg.line(cx - box_w * 0.3, ys(cs.lo_whisker), cx + box_w * 0.3, ys(cs.lo_whisker), color);
        svg.line(cx - box_w * 0.3, ys(cs.hi_whisker), cx + box_w * 0.3, ys(cs.hi_whisker), color);
        svg.rect(cx - box_w / 2, ys(cs.q3), box_w, ys(cs.q1) - ys(cs.q3), color, color, 0.35);
        svg.line(cx - box_w / 2, ys(cs.median), cx + box_w / 2, ys(cs.median), "#000000", 1.6);
    }
    for (int tp = 0; tp < 4; ++tp)
        svg.text(kMarginL + group_w * (tp + 0.5), kHeight - kMarginB + 18, kTp[tp], 12);
    svg.rect(kWidth - kMarginR - 170, kMarginT, 10, 10, kOrange);
    svg.text(kWidth - kMarginR - 154, kMarginT + 9, "ribociclib", 11, "start");
    svg.rect(kWidth - kMarginR - 170, kMarginT + 16, 10, 10, kPurple);
    svg.text(kWidth - kMarginR - 154, kMarginT + 25, "placebo", 11, "start");

    CsvTable csv(std::vector<std::string>{"feature", "timepoint", "arm", "n", "median", "q1",
                                          "q3", "whisker_lo", "whisker_hi", "omitted"});
    for (const auto& cs : stats) {
        csv.add_row({input.feature_name, kTp[static_cast<std::size_t>(cs.tp)],
                     std::to_string(cs.arm), std::to_string(cs.n),
                     cs.omitted ? "" : num17(cs.median), cs.omitted ? "" : num17(cs.q1),
                     cs.omitted ? "" : num17(cs.q3), cs.omitted ? "" : num17(cs.lo_whisker),
                     cs.omitted ? "" : num17(cs.hi_whisker), cs.omitted ? "1" : "0"});
    }
    return {svg.finish(), csv.to_string()};
}

Figure render_cvpath(const survival::LassoPath& path, const FigureSpec&) {
    if (path.points.empty()) throw ValidationError("render_cvpath: empty path");
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& pt : path.points) {
        double lx = std::log(pt.lambda);
        xmin = std::min(xmin, lx);
        xmax = std::max(xmax, lx);
        if (std::isfinite(pt.cv_mean_c)) {
            ymin = std::min(ymin, pt.cv_mean_c - pt.cv_se_c);
            ymax = std::max(ymax, pt.cv_mean_c + pt.cv_se_c);
        }
    }
    if (ymin > ymax) {
        ymin = 0.0;
        ymax = 1.0;
    }
    SvgBuilder svg;
    LinearScale xs = x_scale(xmin, xmax);
    LinearScale ys = y_scale(ymin, ymax);
    draw_axes(svg);
    y_ticks(svg, ys);
    svg.text(kWidth / 2, kHeight - 18, "log(lambda)", 12);
    svg.text(18, kHeight / 2, "C-index", 12);

    std::vector<std::pair<double, double>> line_pts;
    for (const auto& pt : path.points)
        if (std::isfinite(pt.cv_mean_c))
            line_pts.push_back({xs(std::log(pt.lambda)), ys(pt.cv_mean_c)});
    if (line_pts.size() > 1) svg.polyline(line_pts, "#9090c0");

    // nonzero counts along the top, thinned to at most ~25 labels
    std::size_t step = std::max<std::size_t>(1, path.points.size() / 25);
    for (std::size_t i = 0; i < path.points.size(); i += step) {
        const auto& pt = path.points[i];
        svg.text(xs(std::log(pt.lambda)), kMarginT - 8, std::to_string(pt.nonzero), 9,
                 "middle", i == path.opt_index ? "#c02020" : "#606060");
    }
    for (std::size_t i = 0; i < path.points.size(); ++i) {
        const auto& pt = path.points[i];
        if (!std::isfinite(pt.cv_mean_c)) continue;
        double x = xs(std::log(pt.lambda));
        svg.line(x, ys(pt.cv_mean_c - pt.cv_se_c), x, ys(pt.cv_mean_c + pt.cv_se_c), "#808080");
        svg.circle(x, ys(pt.cv_mean_c), i == path.opt_index ? 5.0 : 2.6, "#c02020");
    }
    if (path.opt_index < path.points.size()) {
        double x = xs(std::log(path.points[path.opt_index].lambda));
        svg.line(x, kMarginT, x, kHeight - kMarginB, "#c02020");
    }

    CsvTable csv(std::vector<std::string>{"lambda", "log_lambda", "mean_c", "se_c", "nnz",
                                          "optimum"});
    for (std::size_t i = 0; i < path.points.size(); ++i) {
        const auto& pt = path.points[i];
        csv.add_row({num17(pt.lambda), num17(std::log(pt.lambda)), num17(pt.cv_mean_c),
                     num17(pt.cv_se_c), std::to_string(pt.nonzero),
                     i == path.opt_index ? "1" : "0"});
    }
    return {svg.finish(), csv.to_string()};
}

Figure render_cindex_bars(const std::vector<survival::CIndexEstimate>& estimates,
                          const std::vector<std::string>& labels, const FigureSpec&) {
    if (estimates.size() != labels.size())
        throw ValidationError("render_cindex_bars: labels must align with estimates");
    double ymax = 0.0, ymin = 1e300;
    for (const auto& e : estimates) {
        ymax = std::max({ymax, e.ci_hi, e.point});
        ymin = std::min({ymin, e.ci_lo, e.point, 0.5});
    }
    if (estimates.empty()) {
        ymin = 0.0;
        ymax = 1.0;
    }
    SvgBuilder svg;
    LinearScale ys = y_scale(std::min(ymin, 0.45), std::max(ymax, 0.65));
    draw_axes(svg);
    y_ticks(svg, ys);
    svg.text(18, kHeight / 2, "C-index", 12);

    const double span = kWidth - kMarginL - kMarginR;
    const double slot = estimates.empty() ? span : span / static_cast<double>(estimates.size());
    for (std::size_t i = 0; i < estimates.size(); ++i) {
        const auto& e = estimates[i];
        double cx = kMarginL + slot * (static_cast<double>(i) + 0.5);
        double w = slot * 0.5;
        double y0 = ys(std::min(0.5, e.mean_boot));
        double y1 = ys(e.mean_boot);
        svg.rect(cx - w / 2, std::min(y0, y1), w, std::fabs(y0 - y1), "#4a7fb5", "#2a5f95", 0.8);
        svg.line(cx, ys(e.ci_lo), cx, ys(e.ci_hi), "#202020", 1.4);
        svg.line(cx - 8, ys(e.ci_lo), cx + 8, ys(e.ci_lo), "#202020", 1.4);
        svg.line(cx - 8, ys(e.ci_hi), cx + 8, ys(e.ci_hi), "#202020", 1.4);
        svg.text(cx, ys(e.ci_hi) - 8, num_fixed(e.mean_boot, 4), 10);
        svg.text(cx, kHeight - kMarginB + 18, labels[i], 11);
    }

    CsvTable csv(std::vector<std::string>{"label", "point", "mean_boot", "se_boot", "ci_lo",
                                          "ci_hi", "resamples"});
    for (std::size_t i = 0; i < estimates.size(); ++i) {
        const auto& e = estimates[i];
        csv.add_row({labels[i], num17(e.point), num17(e.mean_boot), num17(e.se_boot),
                     num17(e.ci_lo), num17(e.ci_hi), std::to_string(e.resamples)});
    }
    return {svg.finish(), csv.to_string()};
}

Figure render_importance_bars(const subset::ImportanceTable& table, const FigureSpec&) {
    const std::size_t n = std::min<std::size_t>(table.rows.size(), 30);
    int max_total = 1;
    for (std::size_t i = 0; i < n; ++i) max_total = std::max(max_total, table.rows[i].total);

    SvgBuilder svg;
    draw_axes(svg);
    svg.text(kWidth / 2, kMarginT - 26, "feature importance (selection frequency)", 14);
    LinearScale xs{0.0, static_cast<double>(max_total), kMarginL, kWidth - kMarginR};
    const double span = kHeight - kMarginT - kMarginB;
    const double slot = n ? span / static_cast<double>(n) : span;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& row = table.rows[i];
        double y = kMarginT + slot * static_cast<double>(i) + slot * 0.15;
        svg.rect(kMarginL, y, xs(row.total) - kMarginL, slot * 0.7, "#4a7fb5", "none", 0.85);
        svg.text(kMarginL - 6, y + slot * 0.55, row.feature, 9, "end");
        svg.text(xs(row.total) + 4, y + slot * 0.55, std::to_string(row.total), 9, "start");
    }

    CsvTable csv(std::vector<std::string>{"feature", "screening", "week8", "week16", "week24",
                                          "total"});
    for (const auto& row : table.rows)
        csv.add_row({row.feature, std::to_string(row.per_timepoint[0]),
                     std::to_string(row.per_timepoint[1]), std::to_string(row.per_timepoint[2]),
                     std::to_string(row.per_timepoint[3]), std::to_string(row.total)});
    return {svg.finish(), csv.to_string()};
}

Figure render_trace(const TraceSeries& series, const FigureSpec&) {
    if (series.values.empty()) throw ValidationError("render_trace: empty trace");
    double ymin = 1e300, ymax = -1e300;
    for (double v : series.values) {
        ymin = std::min(ymin, v);
        ymax = std::max(ymax, v);
    }
    if (ymin == ymax) {
        ymin -= 0.5;
        ymax += 0.5;
    }
    const double last_iter = series.burn_in +
                             static_cast<double>(series.values.size() - 1) * series.thin;
    SvgBuilder svg;
    LinearScale xs = x_scale(0.0, std::max(last_iter, 1.0));
    LinearScale ys = y_scale(ymin, ymax);
    // burn-in region shading
    if (series.burn_in > 0)
        svg.rect(xs(0.0), kMarginT, xs(static_cast<double>(series.burn_in)) - xs(0.0),
                 kHeight - kMarginT - kMarginB, "#d9d9d9", "none", 0.6);
    draw_axes(svg);
    y_ticks(svg, ys);
    svg.text(kWidth / 2, kMarginT - 26, series.parameter, 14);
    svg.text(kWidth / 2, kHeight - 18, "iteration", 12);

    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < series.values.size(); ++i)
        pts.push_back({xs(series.burn_in + static_cast<double>(i) * series.thin),
                       ys(series.values[i])});
    if (pts.size() == 1)
        svg.circle(pts[0].first, pts[0].second, 3.0, "#2a5f95");
    else
        svg.polyline(pts, "#2a5f95");

    CsvTable csv(std::vector<std::string>{"iteration", "value"});
    for (std::size_t i = 0; i < series.values.size(); ++i)
        csv.add_row({std::to_string(series.burn_in + static_cast<long>(i) * series.thin),
                     num17(series.values[i])});
    return {svg.finish(), csv.to_string()};
}

std::vector<TraceSeries> trace_series_of(const jointmodel::JointModelFit& fit) {
    std::vector<TraceSeries> out;
    for (std::size_t j = 0; j < fit.parameter_names.size(); ++j) {
        TraceSeries s;
        s.parameter = fit.parameter_names[j];
        s.burn_in = fit.config.burn_in;
        s.thin = fit.config.thin;
        Eigen::VectorXd col = fit.draws.col(static_cast<Eigen::Index>(j));
        s.values.assign(col.data(), col.data() + col.size());
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace longrad::report
