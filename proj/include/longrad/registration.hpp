#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "longrad/cohort.hpp"
#include "longrad/common.hpp"

namespace longrad::registration {

// Maps moving-image physical coordinates into the fixed-image frame.
struct RigidTransform {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    static RigidTransform identity() { return {}; }
    void validate() const;  // R'R = I and det(R) = 1 within 1e-9
    bool operator==(const RigidTransform& o) const {
        return rotation == o.rotation && translation == o.translation;
    }
};

Eigen::Vector3d apply_transform(const RigidTransform& t, const Eigen::Vector3d& p);
RigidTransform compose(const RigidTransform& outer, const RigidTransform& inner);
RigidTransform inverse(const RigidTransform& t);

// Least-squares rigid fit of moving onto fixed (closed-form SVD with
// reflection correction). Requires >= 3 non-collinear points.
RigidTransform kabsch_estimate(const std::vector<Eigen::Vector3d>& moving_pts,
                               const std::vector<Eigen::Vector3d>& fixed_pts);

double rmsd(const RigidTransform& t, const std::vector<Eigen::Vector3d>& moving_pts,
            const std::vector<Eigen::Vector3d>& fixed_pts);

struct IntensityConfig {
    int pyramid_levels = 3;
    int max_iterations_per_level = 200;
    double relative_tolerance = 1e-6;
    double smoothing_sigma_voxels = 1.0;
    // fine-level metric sampling stride (1 = every voxel)
    int finest_stride = 1;
};

struct RegistrationResult {
    RigidTransform transform;
    double final_metric = 0.0;
    int iterations = 0;
    bool converged = false;
    // metric before/after optimisation at each level, coarse to fine
    std::vector<double> level_initial_metric;
    std::vector<double> level_final_metric;
};

// 6-parameter mean-squared-error minimisation under trilinear resampling,
// coarse-to-fine Gaussian pyramid, Nelder-Mead per level. Deterministic.
RegistrationResult register_rigid_intensity(const cohort::ImageVolume& fixed,
                                            const cohort::ImageVolume& moving,
                                            const IntensityConfig& cfg = {});

// JSON with 9 row-major rotation entries + 3 translation entries (mm).
std::string transform_to_json(const RigidTransform& t);
RigidTransform transform_from_json(const std::string& text);

}  // namespace longrad::registration
