#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "longrad/cohort.hpp"
#include "longrad/correspondence.hpp"

namespace longrad::radiomics {

enum class FeatureFamily { Shape2D, FirstOrder, GLCM, External };
std::string to_string(FeatureFamily f);

// Ordered feature map; degenerate entries carry NaN plus a flag and are
// dropped from model matrices downstream, never imputed.
struct FeatureVector {
    std::vector<std::string> names;
    std::vector<double> values;
    std::vector<FeatureFamily> families;
    std::vector<std::uint8_t> degenerate;

    std::size_t size() const { return names.size(); }
    void append(std::string name, double value, FeatureFamily family, bool degen = false);
    double value_of(const std::string& name) const;
    bool is_degenerate(const std::string& name) const;
    void extend(const FeatureVector& other);
};

struct DeltaFeatureVector {
    std::vector<std::string> names;
    std::vector<double> ratios;
    std::vector<std::uint8_t> degenerate;
};

struct Slice2D {
    int width = 0, height = 0;
    std::vector<float> values;
    float at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

Slice2D slice_of(const cohort::ImageVolume& volume, int slice_index);

const std::vector<std::string>& shape2d_feature_names();     // 9
const std::vector<std::string>& firstorder_feature_names();  // 15
const std::vector<std::string>& glcm_feature_names();        // 23
const std::vector<std::string>& internal_feature_names();    // 47, canonical order

struct GlcmConfig {
    double bin_width_hu = 25.0;
    int distance_px = 1;
};

inline constexpr double kDefaultBinWidthHu = 25.0;

FeatureVector shape2d_features(const cohort::MaskRaster& mask, const Eigen::Vector2d& spacing);

FeatureVector firstorder_features(const cohort::MaskRaster& mask, const Slice2D& image_slice,
                                  const Eigen::Vector2d& spacing,
                                  double bin_width_hu = kDefaultBinWidthHu);

FeatureVector glcm_features(const cohort::MaskRaster& mask, const Slice2D& image_slice,
                            const GlcmConfig& cfg = {});

// All 47 implemented features for one lesion.
FeatureVector compute_lesion_features(const cohort::MaskRaster& mask, const Slice2D& image_slice,
                                      const Eigen::Vector2d& spacing, const GlcmConfig& cfg = {});

DeltaFeatureVector delta_features(const FeatureVector& baseline, const FeatureVector& later);

using ExternalKey = std::tuple<std::string, int, std::string>;  // patient, timepoint, lesion

// external_features.csv adapter for the out-of-scope texture families.
std::map<ExternalKey, FeatureVector> ingest_external_features(const std::string& path);

// Per-track per-timepoint feature rows for design assembly. Cross-group
// members of a track unit are averaged per feature first. External features
// (if any) are joined by lesion label; missing external cells are flagged.
cohort::FeatureTable compute_feature_table(const cohort::Cohort& cohort,
                                           const std::vector<correspondence::LesionTrack>& tracks,
                                           const GlcmConfig& cfg = {});

std::string feature_table_to_csv(const cohort::FeatureTable& table,
                                 const std::map<std::string, FeatureFamily>& family_of);

std::map<std::string, FeatureFamily> family_index(const cohort::FeatureTable& table);

}  // namespace longrad::radiomics
