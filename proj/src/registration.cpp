#include "longrad/registration.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "nlohmann/json.hpp"

using nlohmann::json;

namespace longrad::registration {

void RigidTransform::validate() const {
    Eigen::Matrix3d gram = rotation.transpose() * rotation;
    if ((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9)
        throw ValidationError("rigid transform rotation is not orthonormal within 1e-9");
    if (std::fabs(rotation.determinant() - 1.0) > 1e-9)
        throw ValidationError("rigid transform rotation determinant is not +1 within 1e-9");
}

Eigen::Vector3d apply_transform(const RigidTransform& t, const Eigen::Vector3d& p) {
    return t.rotation * p + t.translation;
}

RigidTransform compose(const RigidTransform& outer, const RigidTransform& inner) {
    RigidTransform r;
    r.rotation = outer.rotation * inner.rotation;
    r.translation = outer.rotation * inner.translation + outer.translation;
    return r;
}

RigidTransform inverse(const RigidTransform& t) {
    RigidTransform r;
    r.rotation = t.rotation.transpose();
    r.translation = -(t.rotation.transpose() * t.translation);
    return r;
}

RigidTransform kabsch_estimate(const std::vector<Eigen::Vector3d>& moving_pts,
                               const std::vector<Eigen::Vector3d>& fixed_pts) {
    if (moving_pts.size() != fixed_pts.size())
        throw ValidationError("kabsch_estimate: point lists differ in length");
    const std::size_t n = moving_pts.size();
    if (n < 3)
        throw DegenerateGeometryError("kabsch_estimate: need at least 3 point pairs, got " +
                                      std::to_string(n));

    Eigen::Vector3d cm = Eigen::Vector3d::Zero(), cf = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < n; ++i) {
        cm += moving_pts[i];
        cf += fixed_pts[i];
    }
    cm /= static_cast<double>(n);
    cf /= static_cast<double>(n);

    Eigen::Matrix3d cov_m = Eigen::Matrix3d::Zero();  // moving scatter, collinearity check
    Eigen::Matrix3d h = Eigen::Matrix3d::Zero();      // cross-covariance
    for (std::size_t i = 0; i < n; ++i) {
        Eigen::Vector3d dm = moving_pts[i] - cm;
        Eigen::Vector3d df = fixed_pts[i] - cf;
        cov_m += dm * dm.transpose();
        h += dm * df.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov_m);
    double l_max = es.eigenvalues()[2];
    double l_mid = es.eigenvalues()[1];
    if (!(l_max > 0.0) || l_mid <= 1e-10 * l_max)
        throw DegenerateGeometryError(
            "kabsch_estimate: point configuration is collinear or coincident");

    Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d u = svd.matrixU(), v = svd.matrixV();
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    d(2, 2) = ((v * u.transpose()).determinant() < 0.0) ? -1.0 : 1.0;
    RigidTransform t;
    t.rotation = v * d * u.transpose();
    t.translation = cf - t.rotation * cm;
    return t;
}

double rmsd(const RigidTransform& t, const std::vector<Eigen::Vector3d>& moving_pts,
            const std::vector<Eigen::Vector3d>& fixed_pts) {
    if (moving_pts.size() != fixed_pts.size() || moving_pts.empty())
        throw ValidationError("rmsd: bad point lists");
    double ss = 0.0;
    for (std::size_t i = 0; i < moving_pts.size(); ++i)
        ss += (apply_transform(t, moving_pts[i]) - fixed_pts[i]).squaredNorm();
    return std::sqrt(ss / static_cast<double>(moving_pts.size()));
}

namespace {

using cohort::ImageVolume;

// Separable Gaussian smoothing in voxel units.
ImageVolume gaussian_smooth(const ImageVolume& v, double sigma) {
    int radius = std::max(1, static_cast<int>(std::ceil(2.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += kernel[i + radius];
    }
    for (auto& k : kernel) k /= sum;

    ImageVolume out = v;
    ImageVolume tmp = v;
    auto pass = [&](const ImageVolume& src, ImageVolume& dst, int axis) {
        const int nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
        for (int k = 0; k < nz; ++k)
            for (int j = 0; j < ny; ++j)
                for (int i = 0; i < nx; ++i) {
                    double acc = 0.0;
                    for (int o = -radius; o <= radius; ++o) {
                        int ii = i, jj = j, kk = k;
                        if (axis == 0) ii = std::clamp(i + o, 0, nx - 1);
                        if (axis == 1) jj = std::clamp(j + o, 0, ny - 1);
                        if (axis == 2) kk = std::clamp(k + o, 0, nz - 1);
                        acc += kernel[o + radius] * src.at(ii, jj, kk);
                    }
                    dst.at(i, j, k) = static_cast<float>(acc);
                }
    };
    pass(v, tmp, 0);
    pass(tmp, out, 1);
    pass(out, tmp, 2);
    return tmp;
}

ImageVolume downsample2(const ImageVolume& v) {
    ImageVolume out;
    for (int a = 0; a < 3; ++a) {
        out.dims[a] = std::max(1, (v.dims[a] + 1) / 2);
        out.spacing[a] = v.spacing[a] * 2.0;
    }
    out.origin = v.origin;
    out.direction = v.direction;
    out.voxels.resize(out.voxel_count());
    for (int k = 0; k < out.dims[2]; ++k)
        for (int j = 0; j < out.dims[1]; ++j)
            for (int i = 0; i < out.dims[0]; ++i)
                out.at(i, j, k) = v.at(std::min(2 * i, v.dims[0] - 1),
                                       std::min(2 * j, v.dims[1] - 1),
                                       std::min(2 * k, v.dims[2] - 1));
    return out;
}

Eigen::Matrix3d euler_rotation(double ax, double ay, double az) {
    Eigen::Matrix3d rx, ry, rz;
    rx << 1, 0, 0, 0, std::cos(ax), -std::sin(ax), 0, std::sin(ax), std::cos(ax);
    ry << std::cos(ay), 0, std::sin(ay), 0, 1, 0, -std::sin(ay), 0, std::cos(ay);
    rz << std::cos(az), -std::sin(az), 0, std::sin(az), std::cos(az), 0, 0, 0, 1;
    return rz * ry * rx;
}

// params = (ax, ay, az, tx, ty, tz): rotation about the moving-volume centre
// plus translation, composed into a moving->fixed map.
RigidTransform params_to_transform(const Eigen::Matrix<double, 6, 1>& p,
                                   const Eigen::Vector3d& center) {
    RigidTransform t;
    t.rotation = euler_rotation(p[0], p[1], p[2]);
    t.translation = center - t.rotation * center + p.tail<3>();
    return t;
}

struct MetricEval {
    double mse = 0.0;
    double overlap_fraction = 0.0;
};

MetricEval evaluate_mse(const ImageVolume& fixed, const ImageVolume& moving,
                        const RigidTransform& moving_to_fixed, int stride) {
    RigidTransform fixed_to_moving = inverse(moving_to_fixed);
    double ss = 0.0;
    std::size_t used = 0, total = 0;
    for (int k = 0; k < fixed.dims[2]; k += stride)
        for (int j = 0; j < fixed.dims[1]; j += stride)
            for (int i = 0; i < fixed.dims[0]; i += stride) {
                ++total;
                Eigen::Vector3d pf = fixed.physical(i, j, k);
                auto s = moving.sample(apply_transform(fixed_to_moving, pf));
                if (!s) continue;
                double d = static_cast<double>(fixed.at(i, j, k)) - *s;
                ss += d * d;
                ++used;
            }
    MetricEval e;
    e.overlap_fraction = total ? static_cast<double>(used) / static_cast<double>(total) : 0.0;
    e.mse = used ? ss / static_cast<double>(used) : 1e30;
    if (e.overlap_fraction < 0.05) e.mse = 1e30;
    return e;
}

struct SimplexOutcome {
    Eigen::Matrix<double, 6, 1> best;
    double best_value = 0.0;
    int iterations = 0;
    bool converged = false;
};

// Standard Nelder-Mead on 6 parameters.
SimplexOutcome nelder_mead(const std::function<double(const Eigen::Matrix<double, 6, 1>&)>& f,
                           const Eigen::Matrix<double, 6, 1>& start,
                           const Eigen::Matrix<double, 6, 1>& step, int max_iter, double rel_tol) {
    constexpr int n = 6;
    std::vector<Eigen::Matrix<double, 6, 1>> pts(n + 1, start);
    std::vector<double> vals(n + 1);
    for (int i = 0; i < n; ++i) pts[i + 1][i] += step[i];
    for (int i = 0; i <= n; ++i) vals[i] = f(pts[i]);

    auto order = [&] {
        std::vector<int> idx(n + 1);
        for (int i = 0; i <= n; ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return vals[a] < vals[b]; });
        std::vector<Eigen::Matrix<double, 6, 1>> p2(n + 1);
        std::vector<double> v2(n + 1);
        for (int i = 0; i <= n; ++i) {
            p2[i] = pts[idx[i]];
            v2[i] = vals[idx[i]];
        }
        pts = std::move(p2);
        vals = std::move(v2);
    };

    SimplexOutcome out;
    int iter = 0;
    for (; iter < max_iter; ++iter) {
        order();
        double spread = std::fabs(vals[n] - vals[0]);
        double scale = std::fabs(vals[0]) + std::fabs(vals[n]) + 1e-30;
        if (spread / scale < rel_tol) {
            out.converged = true;
            break;
        }
        Eigen::Matrix<double, 6, 1> centroid = Eigen::Matrix<double, 6, 1>::Zero();
        for (int i = 0; i < n; ++i) centroid += pts[i];
        centroid /= n;

        Eigen::Matrix<double, 6, 1> refl = centroid + (centroid - pts[n]);
        double f_refl = f(refl);
        if (f_refl < vals[0]) {
            Eigen::Matrix<double, 6, 1> expd = centroid + 2.0 * (centroid - pts[n]);
            double f_exp = f(expd);
            if (f_exp < f_refl) {
                pts[n] = expd;
                vals[n] = f_exp;
            } else {
                pts[n] = refl;
                vals[n] = f_refl;
            }
        } else if (f_refl < vals[n - 1]) {
            pts[n] = refl;
            vals[n] = f_refl;
        } else {
            Eigen::Matrix<double, 6, 1> contr = centroid + 0.5 * (pts[n] - centroid);
            double f_con = f(contr);
            if (f_con < vals[n]) {
                pts[n] = contr;
                vals[n] = f_con;
            } else {
                for (int i = 1; i <= n; ++i) {
                    pts[i] = pts[0] + 0.5 * (pts[i] - pts[0]);
                    vals[i] = f(pts[i]);
                }
            }
        }
    }
    order();
    out.best = pts[0];
    out.best_value = vals[0];
    out.iterations = iter;
    return out;
}

bool physical_extents_overlap(const ImageVolume& a, const ImageVolume& b) {
    auto bounds = [](const ImageVolume& v) {
        Eigen::Vector3d lo = Eigen::Vector3d::Constant(1e300);
        Eigen::Vector3d hi = Eigen::Vector3d::Constant(-1e300);
        for (int ci = 0; ci < 2; ++ci)
            for (int cj = 0; cj < 2; ++cj)
                for (int ck = 0; ck < 2; ++ck) {
                    Eigen::Vector3d p = v.physical(ci * (v.dims[0] - 1), cj * (v.dims[1] - 1),
                                                   ck * (v.dims[2] - 1));
                    lo = lo.cwiseMin(p);
                    hi = hi.cwiseMax(p);
                }
        return std::make_pair(lo, hi);
    };
    auto [alo, ahi] = bounds(a);
    auto [blo, bhi] = bounds(b);
    for (int d = 0; d < 3; ++d)
        if (ahi[d] < blo[d] || bhi[d] < alo[d]) return false;
    return true;
}

}  // namespace

RegistrationResult register_rigid_intensity(const ImageVolume& fixed, const ImageVolume& moving,
                                            const IntensityConfig& cfg) {
    fixed.validate("fixed volume");
    moving.validate("moving volume");
    if (!physical_extents_overlap(fixed, moving))
        throw ValidationError("register_rigid_intensity: volumes have no physical overlap");

    // moving-volume centre, used as the rotation pivot at every level
    Eigen::Vector3d center = moving.physical((moving.dims[0] - 1) / 2.0,
                                             (moving.dims[1] - 1) / 2.0,
                                             (moving.dims[2] - 1) / 2.0);

    std::vector<ImageVolume> fixed_pyr{fixed}, moving_pyr{moving};
    for (int l = 1; l < cfg.pyramid_levels; ++l) {
        fixed_pyr.push_back(
            downsample2(gaussian_smooth(fixed_pyr.back(), cfg.smoothing_sigma_voxels)));
        moving_pyr.push_back(
            downsample2(gaussian_smooth(moving_pyr.back(), cfg.smoothing_sigma_voxels)));
    }

    RegistrationResult result;
    Eigen::Matrix<double, 6, 1> params = Eigen::Matrix<double, 6, 1>::Zero();
    int total_iterations = 0;
    bool finest_converged = false;

    for (int l = cfg.pyramid_levels - 1; l >= 0; --l) {
        const ImageVolume& f = fixed_pyr[l];
        const ImageVolume& m = moving_pyr[l];
        const int stride = (l == 0) ? cfg.finest_stride : 1;
        auto objective = [&](const Eigen::Matrix<double, 6, 1>& p) {
            return evaluate_mse(f, m, params_to_transform(p, center), stride).mse;
        };
        double initial = objective(params);
        Eigen::Matrix<double, 6, 1> step;
        double trans_step = f.spacing.maxCoeff();
        double rot_step = (l == 0) ? 0.01 : 0.03;
        step << rot_step, rot_step, rot_step, trans_step, trans_step, trans_step;
        SimplexOutcome nm = nelder_mead(objective, params, step, cfg.max_iterations_per_level,
                                        cfg.relative_tolerance);
        result.level_initial_metric.push_back(initial);
        // keep the incoming parameters when the search does not improve on them
        if (nm.best_value <= initial) {
            params = nm.best;
            result.level_final_metric.push_back(nm.best_value);
        } else {
            result.level_final_metric.push_back(initial);
        }
        total_iterations += nm.iterations;
        if (l == 0) finest_converged = nm.converged;
    }

    result.transform = params_to_transform(params, center);
    result.final_metric = result.level_final_metric.back();
    result.iterations = total_iterations;
    result.converged = finest_converged;
    return result;
}

std::string transform_to_json(const RigidTransform& t) {
    json j;
    std::vector<double> rot(9);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rot[r * 3 + c] = t.rotation(r, c);
    j["rotation"] = rot;
    j["translation"] = {t.translation[0], t.translation[1], t.translation[2]};
    return j.dump(2);
}

RigidTransform transform_from_json(const std::string& text) {
    json j = json::parse(text);
    RigidTransform t;
    auto rot = j.at("rotation");
    if (rot.size() != 9) throw ValidationError("transform JSON: rotation must have 9 entries");
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) t.rotation(r, c) = rot.at(r * 3 + c).get<double>();
    auto tr = j.at("translation");
    if (tr.size() != 3) throw ValidationError("transform JSON: translation must have 3 entries");
    for (int d = 0; d < 3; ++d) t.translation[d] = tr.at(d).get<double>();
    t.validate();
    return t;
}

}  // namespace longrad::registration
