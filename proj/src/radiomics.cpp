#include "longrad/radiomics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "longrad/csv.hpp"

namespace longrad::radiomics {

using cohort::MaskRaster;

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kLogEps = 2.220446049250313e-16;
}  // namespace

std::string to_string(FeatureFamily f) {
    switch (f) {
        case FeatureFamily::Shape2D: return "Shape2D";
        case FeatureFamily::FirstOrder: return "FirstOrder";
        case FeatureFamily::GLCM: return "GLCM";
        case FeatureFamily::External: return "External";
    }
    return "?";
}

void FeatureVector::append(std::string name, double value, FeatureFamily family, bool degen) {
    names.push_back(std::move(name));
    values.push_back(degen ? kNaN : value);
    families.push_back(family);
    degenerate.push_back(degen ? 1 : 0);
}

double FeatureVector::value_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return values[i];
    throw ValidationError("unknown feature '" + name + "'");
}

bool FeatureVector::is_degenerate(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return degenerate[i] != 0;
    throw ValidationError("unknown feature '" + name + "'");
}

void FeatureVector::extend(const FeatureVector& other) {
    for (std::size_t i = 0; i < other.names.size(); ++i) {
        for (const auto& n : names)
            if (n == other.names[i])
                throw ValidationError("feature name collision '" + other.names[i] + "'");
        names.push_back(other.names[i]);
        values.push_back(other.values[i]);
        families.push_back(other.families[i]);
        degenerate.push_back(other.degenerate[i]);
    }
}

Slice2D slice_of(const cohort::ImageVolume& volume, int slice_index) {
    if (slice_index < 0 || slice_index >= volume.dims[2])
        throw ValidationError("slice index out of range");
    Slice2D s;
    s.width = volume.dims[0];
    s.height = volume.dims[1];
    s.values.resize(static_cast<std::size_t>(s.width) * s.height);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
            s.values[static_cast<std::size_t>(y) * s.width + x] = volume.at(x, y, slice_index);
    return s;
}

const std::vector<std::string>& shape2d_feature_names() {
    static const std::vector<std::string> kNames = {
        "shape2D_Elongation",       "shape2D_MajorAxisLength",
        "shape2D_MaximumDiameter",  "shape2D_MeshSurface",
        "shape2D_MinorAxisLength",  "shape2D_Perimeter",
        "shape2D_PerimeterSurfaceRatio", "shape2D_PixelSurface",
        "shape2D_Sphericity"};
    return kNames;
}

const std::vector<std::string>& firstorder_feature_names() {
    static const std::vector<std::string> kNames = {
        "firstorder_Energy",       "firstorder_Entropy",
        "firstorder_Kurtosis",     "firstorder_Maximum",
        "firstorder_Mean",         "firstorder_MeanAbsoluteDeviation",
        "firstorder_Median",       "firstorder_Minimum",
        "firstorder_Range",        "firstorder_RootMeanSquared",
        "firstorder_Skewness",     "firstorder_StandardDeviation",
        "firstorder_TotalEnergy",  "firstorder_Uniformity",
        "firstorder_Variance"};
    return kNames;
}

const std::vector<std::string>& glcm_feature_names() {
    static const std::vector<std::string> kNames = {
        "glcm_Autocorrelation", "glcm_ClusterProminence", "glcm_ClusterShade",
        "glcm_ClusterTendency", "glcm_Contrast",          "glcm_Correlation",
        "glcm_DifferenceAverage", "glcm_DifferenceEntropy", "glcm_DifferenceVariance",
        "glcm_Id",              "glcm_Idm",               "glcm_Idmn",
        "glcm_Idn",             "glcm_Imc1",              "glcm_Imc2",
        "glcm_InverseVariance", "glcm_JointAverage",      "glcm_JointEnergy",
        "glcm_JointEntropy",    "glcm_MCC",               "glcm_MaximumProbability",
        "glcm_SumEntropy",      "glcm_SumSquares"};
    return kNames;
}

const std::vector<std::string>& internal_feature_names() {
    static const std::vector<std::string> kAll = [] {
        std::vector<std::string> v = shape2d_feature_names();
        const auto& fo = firstorder_feature_names();
        const auto& gl = glcm_feature_names();
        v.insert(v.end(), fo.begin(), fo.end());
        v.insert(v.end(), gl.begin(), gl.end());
        return v;
    }();
    return kAll;
}

// ---------------------------------------------------------------------------
// shape (2D)

namespace {

struct Segment {
    Eigen::Vector2d a, b;  // oriented, inside on the left
};

// Marching squares at iso level 0.5 on the zero-padded mask; vertices sit at
// half-pixel offsets in index space.
std::vector<Segment> boundary_mesh(const MaskRaster& mask) {
    auto inside = [&](int x, int y) -> bool {
        if (x < 0 || y < 0 || x >= mask.width || y >= mask.height) return false;
        return mask.at(x, y);
    };
    std::vector<Segment> segs;
    for (int y = -1; y < mask.height; ++y) {
        for (int x = -1; x < mask.width; ++x) {
            int code = (inside(x, y) ? 1 : 0) | (inside(x + 1, y) ? 2 : 0) |
                       (inside(x + 1, y + 1) ? 4 : 0) | (inside(x, y + 1) ? 8 : 0);
            if (code == 0 || code == 15) continue;
            Eigen::Vector2d s(x + 0.5, y), e(x + 1.0, y + 0.5), n(x + 0.5, y + 1.0),
                w(x, y + 0.5);
            auto add = [&](const Eigen::Vector2d& p, const Eigen::Vector2d& q) {
                segs.push_back({p, q});
            };
            switch (code) {
                case 1: add(s, w); break;
                case 2: add(e, s); break;
                case 3: add(e, w); break;
                case 4: add(n, e); break;
                case 5: add(s, e); add(n, w); break;  // saddle: centre inside
                case 6: add(n, s); break;
                case 7: add(n, w); break;
                case 8: add(w, n); break;
                case 9: add(s, n); break;
                case 10: add(w, s); add(e, n); break;  // saddle: centre inside
                case 11: add(e, n); break;
                case 12: add(w, e); break;
                case 13: add(s, e); break;
                case 14: add(w, s); break;
                default: break;
            }
        }
    }
    return segs;
}

}  // namespace

FeatureVector shape2d_features(const MaskRaster& mask, const Eigen::Vector2d& spacing) {
    const std::size_t count = mask.pixel_count();
    if (count == 0) throw ValidationError("shape2d_features: empty mask");
    if (count == 1)
        throw DegenerateShapeError("shape2d_features: single-pixel mask, axis lengths undefined");

    const double sx = spacing[0], sy = spacing[1];
    auto segs = boundary_mesh(mask);

    // shoelace over oriented closed loops (inside kept on the left)
    double area2 = 0.0, perimeter = 0.0;
    for (const auto& seg : segs) {
        Eigen::Vector2d a(seg.a[0] * sx, seg.a[1] * sy), b(seg.b[0] * sx, seg.b[1] * sy);
        area2 += a[0] * b[1] - b[0] * a[1];
        perimeter += (b - a).norm();
    }
    double mesh_surface = 0.5 * area2;

    double max_diameter = 0.0;
    {
        std::vector<Eigen::Vector2d> verts;
        verts.reserve(segs.size());
        for (const auto& seg : segs) verts.emplace_back(seg.a[0] * sx, seg.a[1] * sy);
        for (std::size_t i = 0; i < verts.size(); ++i)
            for (std::size_t j = i + 1; j < verts.size(); ++j)
                max_diameter = std::max(max_diameter, (verts[i] - verts[j]).norm());
    }

    // PCA over the physical pixel regions: population covariance of centres
    // plus the per-pixel uniform-square term s^2/12
    double mx = 0.0, my = 0.0;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(x, y)) {
                mx += x * sx;
                my += y * sy;
            }
    mx /= static_cast<double>(count);
    my /= static_cast<double>(count);
    double cxx = 0.0, cyy = 0.0, cxy = 0.0;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(x, y)) {
                double dx = x * sx - mx, dy = y * sy - my;
                cxx += dx * dx;
                cyy += dy * dy;
                cxy += dx * dy;
            }
    cxx = cxx / static_cast<double>(count) + sx * sx / 12.0;
    cyy = cyy / static_cast<double>(count) + sy * sy / 12.0;
    cxy /= static_cast<double>(count);
    Eigen::Matrix2d cov;
    cov << cxx, cxy, cxy, cyy;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov);
    double l2 = es.eigenvalues()[0], l1 = es.eigenvalues()[1];  // l1 >= l2
    l2 = std::max(l2, 0.0);

    double major = 4.0 * std::sqrt(l1);
    double minor = 4.0 * std::sqrt(l2);
    double elongation = std::sqrt(l2 / l1);
    double pixel_surface = static_cast<double>(count) * sx * sy;
    double sphericity = 2.0 * std::sqrt(M_PI * mesh_surface) / perimeter;

    FeatureVector out;
    out.append("shape2D_Elongation", elongation, FeatureFamily::Shape2D);
    out.append("shape2D_MajorAxisLength", major, FeatureFamily::Shape2D);
    out.append("shape2D_MaximumDiameter", max_diameter, FeatureFamily::Shape2D);
    out.append("shape2D_MeshSurface", mesh_surface, FeatureFamily::Shape2D);
    out.append("shape2D_MinorAxisLength", minor, FeatureFamily::Shape2D);
    out.append("shape2D_Perimeter", perimeter, FeatureFamily::Shape2D);
    out.append("shape2D_PerimeterSurfaceRatio", perimeter / mesh_surface, FeatureFamily::Shape2D);
    out.append("shape2D_PixelSurface", pixel_surface, FeatureFamily::Shape2D);
    out.append("shape2D_Sphericity", sphericity, FeatureFamily::Shape2D);
    return out;
}

// ---------------------------------------------------------------------------
// first order

namespace {

std::vector<double> masked_values(const MaskRaster& mask, const Slice2D& slice) {
    if (mask.width != slice.width || mask.height != slice.height)
        throw ValidationError("mask and image slice dimensions differ");
    std::vector<double> vals;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(x, y)) vals.push_back(static_cast<double>(slice.at(x, y)));
    if (vals.empty()) throw ValidationError("empty mask");
    return vals;
}

// fixed-bin-width discretisation aligned to multiples of the width
std::vector<long> discretize(const std::vector<double>& vals, double bin_width) {
    double mn = *std::min_element(vals.begin(), vals.end());
    long base = static_cast<long>(std::floor(mn / bin_width));
    std::vector<long> bins(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i)
        bins[i] = static_cast<long>(std::floor(vals[i] / bin_width)) - base + 1;
    return bins;
}

}  // namespace

FeatureVector firstorder_features(const MaskRaster& mask, const Slice2D& image_slice,
                                  const Eigen::Vector2d& spacing, double bin_width_hu) {
    std::vector<double> vals = masked_values(mask, image_slice);
    const double n = static_cast<double>(vals.size());

    double sum = 0.0, sum2 = 0.0;
    double mn = vals[0], mx = vals[0];
    for (double v : vals) {
        sum += v;
        sum2 += v * v;
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    double mean = sum / n;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0, mad = 0.0;
    for (double v : vals) {
        double d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
        mad += std::fabs(d);
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    mad /= n;

    std::vector<double> sorted = vals;
    std::sort(sorted.begin(), sorted.end());
    double median = (sorted.size() % 2 == 1)
                        ? sorted[sorted.size() / 2]
                        : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);

    bool constant = !(m2 > 0.0);
    double skewness = constant ? kNaN : m3 / std::pow(m2, 1.5);
    double kurtosis = constant ? kNaN : m4 / (m2 * m2);  // non-excess: normal -> 3

    // histogram statistics over the discretised values
    std::vector<long> bins = discretize(vals, bin_width_hu);
    std::map<long, double> hist;
    for (long b : bins) hist[b] += 1.0;
    double entropy = 0.0, uniformity = 0.0;
    for (const auto& [b, cnt] : hist) {
        double p = cnt / n;
        entropy -= p * std::log2(p + kLogEps);
        uniformity += p * p;
    }

    const double pixel_area = spacing[0] * spacing[1];
    FeatureVector out;
    out.append("firstorder_Energy", sum2, FeatureFamily::FirstOrder);
    out.append("firstorder_Entropy", entropy, FeatureFamily::FirstOrder);
    out.append("firstorder_Kurtosis", kurtosis, FeatureFamily::FirstOrder, constant);
    out.append("firstorder_Maximum", mx, FeatureFamily::FirstOrder);
    out.append("firstorder_Mean", mean, FeatureFamily::FirstOrder);
    out.append("firstorder_MeanAbsoluteDeviation", mad, FeatureFamily::FirstOrder);
    out.append("firstorder_Median", median, FeatureFamily::FirstOrder);
    out.append("firstorder_Minimum", mn, FeatureFamily::FirstOrder);
    out.append("firstorder_Range", mx - mn, FeatureFamily::FirstOrder);
    out.append("firstorder_RootMeanSquared", std::sqrt(sum2 / n), FeatureFamily::FirstOrder);
    out.append("firstorder_Skewness", skewness, FeatureFamily::FirstOrder, constant);
    out.append("firstorder_StandardDeviation", std::sqrt(m2), FeatureFamily::FirstOrder);
    out.append("firstorder_TotalEnergy", sum2 * pixel_area, FeatureFamily::FirstOrder);
    out.append("firstorder_Uniformity", uniformity, FeatureFamily::FirstOrder);
    out.append("firstorder_Variance", m2, FeatureFamily::FirstOrder);
    return out;
}

// ---------------------------------------------------------------------------
// GLCM

namespace {

struct GlcmAccum {
    Eigen::MatrixXd p;  // normalised symmetric co-occurrence matrix
    bool empty = true;
};

GlcmAccum accumulate_direction(const MaskRaster& mask, const std::vector<long>& bin_of_pixel,
                               int ng, int dx, int dy) {
    GlcmAccum g;
    g.p = Eigen::MatrixXd::Zero(ng, ng);
    double total = 0.0;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            if (!mask.at(x, y)) continue;
            int x2 = x + dx, y2 = y + dy;
            if (x2 < 0 || y2 < 0 || x2 >= mask.width || y2 >= mask.height) continue;
            if (!mask.at(x2, y2)) continue;
            long a = bin_of_pixel[static_cast<std::size_t>(y) * mask.width + x];
            long b = bin_of_pixel[static_cast<std::size_t>(y2) * mask.width + x2];
            g.p(a - 1, b - 1) += 1.0;
            g.p(b - 1, a - 1) += 1.0;
            total += 2.0;
        }
    if (total > 0.0) {
        g.p /= total;
        g.empty = false;
    }
    return g;
}

struct GlcmFeatures {
    std::map<std::string, double> v;
    bool correlation_degenerate = false;
};

GlcmFeatures glcm_features_of(const Eigen::MatrixXd& p) {
    const int ng = static_cast<int>(p.rows());
    GlcmFeatures out;

    Eigen::VectorXd px = p.rowwise().sum(), py = p.colwise().sum();
    double mu_x = 0.0, mu_y = 0.0;
    for (int i = 0; i < ng; ++i) {
        mu_x += (i + 1) * px[i];
        mu_y += (i + 1) * py[i];
    }
    double var_x = 0.0, var_y = 0.0;
    for (int i = 0; i < ng; ++i) {
        var_x += px[i] * (i + 1 - mu_x) * (i + 1 - mu_x);
        var_y += py[i] * (i + 1 - mu_y) * (i + 1 - mu_y);
    }

    std::vector<double> p_sum(2 * ng + 1, 0.0);   // index k = i + j, 2..2*ng
    std::vector<double> p_diff(ng, 0.0);          // index k = |i - j|, 0..ng-1
    double autocorr = 0.0, contrast = 0.0, cluster2 = 0.0, cluster3 = 0.0, cluster4 = 0.0;
    double joint_energy = 0.0, joint_entropy = 0.0, max_prob = 0.0, sum_squares = 0.0;
    double corr_num = 0.0;
    for (int i = 0; i < ng; ++i)
        for (int j = 0; j < ng; ++j) {
            double pij = p(i, j);
            if (pij > 0.0) {
                joint_entropy -= pij * std::log2(pij + kLogEps);
                max_prob = std::max(max_prob, pij);
            }
            joint_energy += pij * pij;
            double ii = i + 1, jj = j + 1;
            autocorr += ii * jj * pij;
            contrast += (ii - jj) * (ii - jj) * pij;
            double cs = ii + jj - mu_x - mu_y;
            cluster2 += cs * cs * pij;
            cluster3 += cs * cs * cs * pij;
            cluster4 += cs * cs * cs * cs * pij;
            sum_squares += (ii - mu_x) * (ii - mu_x) * pij;
            corr_num += (ii - mu_x) * (jj - mu_y) * pij;
            p_sum[i + j + 2] += pij;
            p_diff[std::abs(i - j)] += pij;
        }

    double diff_avg = 0.0, diff_entropy = 0.0, inv_var = 0.0;
    double id = 0.0, idm = 0.0, idmn = 0.0, idn = 0.0;
    for (int k = 0; k < ng; ++k) {
        double pk = p_diff[k];
        diff_avg += k * pk;
        if (pk > 0.0) diff_entropy -= pk * std::log2(pk + kLogEps);
        if (k >= 1) inv_var += pk / (static_cast<double>(k) * k);
        id += pk / (1.0 + k);
        idm += pk / (1.0 + static_cast<double>(k) * k);
        idmn += pk / (1.0 + (static_cast<double>(k) * k) / (static_cast<double>(ng) * ng));
        idn += pk / (1.0 + static_cast<double>(k) / ng);
    }
    double diff_var = 0.0;
    for (int k = 0; k < ng; ++k) diff_var += (k - diff_avg) * (k - diff_avg) * p_diff[k];

    double sum_entropy = 0.0;
    for (int k = 2; k <= 2 * ng; ++k)
        if (p_sum[k] > 0.0) sum_entropy -= p_sum[k] * std::log2(p_sum[k] + kLogEps);

    double hx = 0.0, hy = 0.0, hxy1 = 0.0, hxy2 = 0.0;
    for (int i = 0; i < ng; ++i) {
        if (px[i] > 0.0) hx -= px[i] * std::log2(px[i] + kLogEps);
        if (py[i] > 0.0) hy -= py[i] * std::log2(py[i] + kLogEps);
    }
    for (int i = 0; i < ng; ++i)
        for (int j = 0; j < ng; ++j) {
            double q = px[i] * py[j];
            if (q > 0.0) {
                hxy1 -= p(i, j) * std::log2(q + kLogEps);
                hxy2 -= q * std::log2(q + kLogEps);
            }
        }
    double hmax = std::max(hx, hy);
    double imc1 = hmax > 0.0 ? (joint_entropy - hxy1) / hmax : 0.0;
    double imc2_arg = 1.0 - std::exp(-2.0 * (hxy2 - joint_entropy));
    double imc2 = imc2_arg > 0.0 ? std::sqrt(imc2_arg) : 0.0;

    // maximal correlation coefficient via the second eigenvalue of Q over
    // the gray levels present
    std::vector<int> present;
    for (int i = 0; i < ng; ++i)
        if (px[i] > 0.0) present.push_back(i);
    double mcc = 1.0;
    if (present.size() > 1) {
        const int m = static_cast<int>(present.size());
        Eigen::MatrixXd q(m, m);
        for (int a = 0; a < m; ++a)
            for (int b = 0; b < m; ++b) {
                double acc = 0.0;
                for (int c = 0; c < m; ++c) {
                    double denom = px[present[a]] * py[present[c]];
                    if (denom > 0.0) acc += p(present[a], present[c]) * p(present[b], present[c]) / denom;
                }
                q(a, b) = acc;
            }
        Eigen::EigenSolver<Eigen::MatrixXd> es(q);
        std::vector<double> re(m);
        for (int a = 0; a < m; ++a) re[a] = es.eigenvalues()[a].real();
        std::sort(re.begin(), re.end());
        mcc = std::sqrt(std::clamp(re[m - 2], 0.0, 1.0));
    }

    bool corr_degenerate = !(var_x > 0.0 && var_y > 0.0);
    double correlation = corr_degenerate ? kNaN : corr_num / std::sqrt(var_x * var_y);

    out.v["glcm_Autocorrelation"] = autocorr;
    out.v["glcm_ClusterProminence"] = cluster4;
    out.v["glcm_ClusterShade"] = cluster3;
    out.v["glcm_ClusterTendency"] = cluster2;
    out.v["glcm_Contrast"] = contrast;
    out.v["glcm_Correlation"] = correlation;
    out.v["glcm_DifferenceAverage"] = diff_avg;
    out.v["glcm_DifferenceEntropy"] = diff_entropy;
    out.v["glcm_DifferenceVariance"] = diff_var;
    out.v["glcm_Id"] = id;
    out.v["glcm_Idm"] = idm;
    out.v["glcm_Idmn"] = idmn;
    out.v["glcm_Idn"] = idn;
    out.v["glcm_Imc1"] = imc1;
    out.v["glcm_Imc2"] = imc2;
    out.v["glcm_InverseVariance"] = inv_var;
    out.v["glcm_JointAverage"] = mu_x;
    out.v["glcm_JointEnergy"] = joint_energy;
    out.v["glcm_JointEntropy"] = joint_entropy;
    out.v["glcm_MCC"] = mcc;
    out.v["glcm_MaximumProbability"] = max_prob;
    out.v["glcm_SumEntropy"] = sum_entropy;
    out.v["glcm_SumSquares"] = sum_squares;
    out.correlation_degenerate = corr_degenerate;
    return out;
}

}  // namespace

FeatureVector glcm_features(const MaskRaster& mask, const Slice2D& image_slice,
                            const GlcmConfig& cfg) {
    std::vector<double> vals = masked_values(mask, image_slice);
    if (vals.size() < 2) throw ValidationError("glcm_features: need at least 2 masked pixels");
    if (!(cfg.bin_width_hu > 0.0)) throw ValidationError("glcm_features: bin width must be positive");
    if (cfg.distance_px < 1) throw ValidationError("glcm_features: distance must be >= 1");

    // discrete bins on the full raster (only masked pixels are meaningful)
    double mn = vals[0];
    for (double v : vals) mn = std::min(mn, v);
    long base = static_cast<long>(std::floor(mn / cfg.bin_width_hu));
    std::vector<long> bin_of_pixel(static_cast<std::size_t>(mask.width) * mask.height, 0);
    long ng = 0;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            if (!mask.at(x, y)) continue;
            long b = static_cast<long>(
                         std::floor(static_cast<double>(image_slice.at(x, y)) / cfg.bin_width_hu)) -
                     base + 1;
            bin_of_pixel[static_cast<std::size_t>(y) * mask.width + x] = b;
            ng = std::max(ng, b);
        }

    const int d = cfg.distance_px;
    const int offsets[4][2] = {{d, 0}, {d, d}, {0, d}, {-d, d}};
    std::vector<GlcmFeatures> per_direction;
    for (const auto& off : offsets) {
        GlcmAccum acc = accumulate_direction(mask, bin_of_pixel, static_cast<int>(ng), off[0], off[1]);
        if (acc.empty) continue;  // no valid pairs along this direction
        per_direction.push_back(glcm_features_of(acc.p));
    }
    if (per_direction.empty())
        throw DegenerateShapeError("glcm_features: no valid pixel pairs in any direction");

    FeatureVector out;
    bool corr_degen = false;
    for (const auto& f : per_direction) corr_degen = corr_degen || f.correlation_degenerate;
    for (const auto& name : glcm_feature_names()) {
        bool degen = (name == "glcm_Correlation") && corr_degen;
        double mean = 0.0;
        if (!degen) {
            for (const auto& f : per_direction) mean += f.v.at(name);
            mean /= static_cast<double>(per_direction.size());
        }
        out.append(name, mean, FeatureFamily::GLCM, degen);
    }
    return out;
}

FeatureVector compute_lesion_features(const MaskRaster& mask, const Slice2D& image_slice,
                                      const Eigen::Vector2d& spacing, const GlcmConfig& cfg) {
    FeatureVector out = shape2d_features(mask, spacing);
    out.extend(firstorder_features(mask, image_slice, spacing, cfg.bin_width_hu));
    out.extend(glcm_features(mask, image_slice, cfg));
    return out;
}

DeltaFeatureVector delta_features(const FeatureVector& baseline, const FeatureVector& later) {
    if (baseline.names != later.names)
        throw ValidationError("delta_features: baseline/later key sets differ");
    DeltaFeatureVector out;
    out.names = baseline.names;
    out.ratios.resize(baseline.size());
    out.degenerate.resize(baseline.size());
    for (std::size_t i = 0; i < baseline.size(); ++i) {
        bool degen = baseline.degenerate[i] || later.degenerate[i] ||
                     std::fabs(baseline.values[i]) < cohort::kDeltaBaselineEps;
        out.degenerate[i] = degen ? 1 : 0;
        out.ratios[i] = degen ? kNaN : later.values[i] / baseline.values[i];
    }
    return out;
}

std::map<ExternalKey, FeatureVector> ingest_external_features(const std::string& path) {
    CsvTable t = CsvTable::read_file(path);
    for (const auto& col : {"patient_id", "timepoint", "lesion_label", "feature_name", "value"})
        t.column_index(col);

    std::set<std::string> internal(internal_feature_names().begin(),
                                   internal_feature_names().end());
    std::map<ExternalKey, FeatureVector> out;
    std::set<std::tuple<std::string, int, std::string, std::string>> seen;
    for (std::size_t r = 0; r < t.row_count(); ++r) {
        std::string pid = t.cell(r, "patient_id");
        int tp = cohort::Timepoint::from_label(t.cell(r, "timepoint")).index();
        std::string lesion = t.cell(r, "lesion_label");
        std::string feat = t.cell(r, "feature_name");
        if (internal.count(feat))
            throw ValidationError("external feature '" + feat +
                                  "' collides with an internally computed feature");
        double value;
        try {
            value = parse_double(t.cell(r, "value"), "value");
        } catch (const ValidationError&) {
            throw ValidationError("external_features.csv row " + std::to_string(r + 2) +
                                  ": non-numeric value '" + t.cell(r, "value") + "'");
        }
        if (!seen.insert({pid, tp, lesion, feat}).second)
            throw ValidationError("duplicate external feature row for (" + pid + ", " +
                                  cohort::Timepoint::from_index(tp).label() + ", " + lesion +
                                  ", " + feat + ")");
        out[{pid, tp, lesion}].append(feat, value, FeatureFamily::External);
    }
    // canonical per-lesion ordering
    for (auto& [key, fv] : out) {
        std::vector<std::size_t> idx(fv.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(),
                  [&](std::size_t a, std::size_t b) { return fv.names[a] < fv.names[b]; });
        FeatureVector sorted;
        for (std::size_t i : idx)
            sorted.append(fv.names[i], fv.values[i], fv.families[i], fv.degenerate[i] != 0);
        fv = std::move(sorted);
    }
    return out;
}

cohort::FeatureTable compute_feature_table(const cohort::Cohort& cohort_data,
                                           const std::vector<correspondence::LesionTrack>& tracks,
                                           const GlcmConfig& cfg) {
    using cohort::LesionAnnotation;

    // external names across the whole cohort define extra columns
    std::set<std::string> external_names;
    std::map<ExternalKey, std::map<std::string, double>> external;
    for (const auto& row : cohort_data.external_features) {
        external_names.insert(row.feature_name);
        external[{row.patient_id, row.timepoint.index(), row.lesion_label}][row.feature_name] =
            row.value;
    }

    cohort::FeatureTable table;
    table.feature_names = internal_feature_names();
    for (const auto& n : external_names) table.feature_names.push_back(n);
    const std::size_t nf = table.feature_names.size();
    const std::size_t n_internal = internal_feature_names().size();

    std::map<std::tuple<std::string, int, std::string, std::string>, const LesionAnnotation*>
        ann_index;
    for (const auto& a : cohort_data.annotations)
        ann_index[{a.patient_id, a.timepoint.index(), cohort::to_string(a.source_group),
                   a.lesion_label}] = &a;

    for (const auto& track : tracks) {
        for (const auto& [tp, members] : track.members) {
            std::vector<double> sum(nf, 0.0);
            std::vector<std::size_t> cnt(nf, 0);
            for (const auto& mb : members) {
                auto it = ann_index.find(
                    {track.patient_id, tp, cohort::to_string(mb.group), mb.lesion_label});
                if (it == ann_index.end())
                    throw IntegrityError("track member without annotation: " + track.patient_id +
                                         "/" + mb.lesion_label);
                const LesionAnnotation& ann = *it->second;
                const auto& vol = cohort_data.volumes.at(ann.series_id);
                Slice2D slice = slice_of(vol, ann.slice_index);
                Eigen::Vector2d spacing(vol.spacing[0], vol.spacing[1]);
                FeatureVector fv = compute_lesion_features(ann.mask, slice, spacing, cfg);
                for (std::size_t i = 0; i < n_internal; ++i) {
                    if (fv.degenerate[i]) continue;
                    sum[i] += fv.values[i];
                    cnt[i] += 1;
                }
                auto ext_it = external.find({track.patient_id, tp, mb.lesion_label});
                if (ext_it != external.end()) {
                    std::size_t col = n_internal;
                    for (const auto& name : external_names) {
                        auto vit = ext_it->second.find(name);
                        if (vit != ext_it->second.end()) {
                            sum[col] += vit->second;
                            cnt[col] += 1;
                        }
                        ++col;
                    }
                }
            }
            cohort::FeatureTableRow row;
            row.patient_id = track.patient_id;
            row.timepoint = cohort::Timepoint::from_index(tp);
            row.track_id = track.track_id;
            row.values.resize(nf);
            row.degenerate.resize(nf);
            for (std::size_t i = 0; i < nf; ++i) {
                if (cnt[i] == 0) {
                    row.values[i] = kNaN;
                    row.degenerate[i] = 1;
                } else {
                    row.values[i] = sum[i] / static_cast<double>(cnt[i]);
                    row.degenerate[i] = 0;
                }
            }
            table.rows.push_back(std::move(row));
        }
    }
    return table;
}

std::map<std::string, FeatureFamily> family_index(const cohort::FeatureTable& table) {
    std::map<std::string, FeatureFamily> out;
    std::set<std::string> shape(shape2d_feature_names().begin(), shape2d_feature_names().end());
    std::set<std::string> fo(firstorder_feature_names().begin(), firstorder_feature_names().end());
    std::set<std::string> gl(glcm_feature_names().begin(), glcm_feature_names().end());
    for (const auto& n : table.feature_names) {
        if (shape.count(n)) out[n] = FeatureFamily::Shape2D;
        else if (fo.count(n)) out[n] = FeatureFamily::FirstOrder;
        else if (gl.count(n)) out[n] = FeatureFamily::GLCM;
        else out[n] = FeatureFamily::External;
    }
    return out;
}

std::string feature_table_to_csv(const cohort::FeatureTable& table,
                                 const std::map<std::string, FeatureFamily>& family_of) {
    CsvTable t(std::vector<std::string>{"patient_id", "timepoint", "track_id", "feature_name",
                                        "family", "value", "degenerate_flag"});
    for (const auto& row : table.rows) {
        for (std::size_t i = 0; i < table.feature_names.size(); ++i) {
            const std::string& name = table.feature_names[i];
            t.add_row({row.patient_id, row.timepoint.label(), row.track_id, name,
                       to_string(family_of.at(name)),
                       row.degenerate[i] ? "" : num17(row.values[i]),
                       row.degenerate[i] ? "1" : "0"});
        }
    }
    return t.to_string();
}

}  // namespace longrad::radiomics
