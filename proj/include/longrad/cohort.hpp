#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "longrad/common.hpp"

namespace longrad::cohort {

// Scan schedule: Screening/Baseline then Weeks 8, 16, 24.
class Timepoint {
  public:
    static constexpr int kCount = 4;

    Timepoint() : index_(0) {}
    static Timepoint from_index(int index);
    static Timepoint from_label(const std::string& label);

    int index() const { return index_; }
    double days() const { return 56.0 * index_; }
    const std::string& label() const;

    bool operator==(const Timepoint& o) const { return index_ == o.index_; }
    bool operator!=(const Timepoint& o) const { return index_ != o.index_; }
    bool operator<(const Timepoint& o) const { return index_ < o.index_; }
    bool operator<=(const Timepoint& o) const { return index_ <= o.index_; }

  private:
    explicit Timepoint(int index) : index_(index) {}
    int index_;
};

enum class SourceGroup { G1, G2 };
std::string to_string(SourceGroup g);
SourceGroup source_group_from_string(const std::string& s);

// Scalar volume on a regular grid; physical position of voxel (i,j,k) is
// origin + direction * (spacing .* (i,j,k)). Voxels are x-fastest.
struct ImageVolume {
    std::array<int, 3> dims{0, 0, 0};
    Eigen::Vector3d spacing{1.0, 1.0, 1.0};
    Eigen::Vector3d origin{0.0, 0.0, 0.0};
    Eigen::Matrix3d direction = Eigen::Matrix3d::Identity();
    std::vector<float> voxels;

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    float at(int i, int j, int k) const {
        return voxels[static_cast<std::size_t>(k) * dims[1] * dims[0] +
                      static_cast<std::size_t>(j) * dims[0] + i];
    }
    float& at(int i, int j, int k) {
        return voxels[static_cast<std::size_t>(k) * dims[1] * dims[0] +
                      static_cast<std::size_t>(j) * dims[0] + i];
    }
    Eigen::Vector3d physical(double i, double j, double k) const {
        return origin + direction * Eigen::Vector3d(spacing[0] * i, spacing[1] * j, spacing[2] * k);
    }
    Eigen::Vector3d continuous_index(const Eigen::Vector3d& phys) const {
        Eigen::Vector3d rel = direction.transpose() * (phys - origin);
        return {rel[0] / spacing[0], rel[1] / spacing[1], rel[2] / spacing[2]};
    }
    bool contains_physical(const Eigen::Vector3d& phys) const;
    // Trilinear sample at a physical point; returns nullopt outside the grid.
    std::optional<double> sample(const Eigen::Vector3d& phys) const;

    void validate(const std::string& what) const;
    bool operator==(const ImageVolume& o) const;
};

// 2D binary raster aligned with one axial slice of the owning volume.
struct MaskRaster {
    int width = 0, height = 0;
    std::vector<std::uint8_t> data;  // row-major, y*width + x, 0/1
    Eigen::Vector2d spacing{1.0, 1.0};
    Eigen::Vector2d origin{0.0, 0.0};

    bool at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
    void set(int x, int y, bool v) { data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
    std::size_t pixel_count() const;
    bool operator==(const MaskRaster& o) const;
};

struct LesionAnnotation {
    std::string patient_id;
    Timepoint timepoint;
    SourceGroup source_group = SourceGroup::G1;
    std::string series_id;
    std::string lesion_label;
    Eigen::Vector3d centroid{0.0, 0.0, 0.0};  // physical mm
    int slice_index = 0;
    MaskRaster mask;
    std::string mask_id;  // file stem under masks/

    bool operator==(const LesionAnnotation& o) const;
};

// The nine baseline covariates; ARM (1 = ribociclib) is the last.
struct Demographics {
    static constexpr int kCount = 9;
    static const std::array<std::string, kCount>& names();

    std::array<double, kCount> values{};
    double arm() const { return values[kCount - 1]; }
    void validate(const std::string& patient_id) const;
    bool operator==(const Demographics& o) const { return values == o.values; }
};

struct SurvivalOutcome {
    double time_days = 0.0;
    int event = 0;  // 1 = progression observed, 0 = censored
    bool operator==(const SurvivalOutcome& o) const {
        return time_days == o.time_days && event == o.event;
    }
};

struct Patient {
    std::string id;
    Demographics demographics;
    SurvivalOutcome outcome;
    bool operator==(const Patient& o) const {
        return id == o.id && demographics == o.demographics && outcome == o.outcome;
    }
};

struct ExternalFeatureRow {
    std::string patient_id;
    Timepoint timepoint;
    std::string lesion_label;
    std::string feature_name;
    double value = 0.0;
    bool operator==(const ExternalFeatureRow& o) const;
};

// Immutable after load; safe for concurrent readers.
struct Cohort {
    std::vector<Patient> patients;                    // sorted by id
    std::map<std::string, ImageVolume> volumes;       // series_id -> volume
    std::vector<LesionAnnotation> annotations;        // canonical order
    std::vector<ExternalFeatureRow> external_features;

    const Patient& patient(const std::string& id) const;
    bool has_patient(const std::string& id) const;
    std::vector<const LesionAnnotation*> annotations_for(const std::string& patient_id) const;
    bool operator==(const Cohort& o) const;
};

Cohort load_cohort(const std::string& dir_path);
void save_cohort(const Cohort& cohort, const std::string& dir_path);

// Per-lesion feature values feeding design assembly; produced by the
// radiomics stage, keyed by lesion track so deltas compare like with like.
struct FeatureTableRow {
    std::string patient_id;
    Timepoint timepoint;
    std::string track_id;
    std::vector<double> values;           // canonical feature order
    std::vector<std::uint8_t> degenerate; // parallel to values
};

struct FeatureTable {
    std::vector<std::string> feature_names;
    std::vector<FeatureTableRow> rows;
};

// Covariate blocks for one patient. Z/W/V are delta (ratio-to-screening)
// vectors; a block may be absent (dropout), never silently zero-filled.
struct PatientDesign {
    std::string patient_id;
    std::vector<double> x;  // baseline features
    std::vector<std::uint8_t> x_degenerate;
    std::array<bool, 3> has_delta{false, false, false};          // Weeks 8/16/24
    std::array<std::vector<double>, 3> delta;                    // Z, W, V
    std::array<std::vector<std::uint8_t>, 3> delta_degenerate;
    Demographics demographics;
    double arm = 0.0;
    SurvivalOutcome outcome;
};

struct DesignSet {
    std::vector<std::string> feature_names;
    Timepoint max_timepoint;
    std::vector<PatientDesign> patients;
    std::vector<std::string> excluded_patients;  // no Screening features
};

// Baseline-near-zero deltas are flagged degenerate, not imputed.
inline constexpr double kDeltaBaselineEps = 1e-12;

DesignSet assemble_design(const Cohort& cohort, const FeatureTable& features,
                          Timepoint max_timepoint);

// masks/<id>.pgm payload (binary P5, 255 = inside).
MaskRaster read_pgm(const std::string& path);
void write_pgm(const MaskRaster& mask, const std::string& path);

}  // namespace longrad::cohort
