#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "longrad/cohort.hpp"
#include "longrad/correspondence.hpp"
#include "longrad/minitoml.hpp"

namespace longrad::pipeline {

inline constexpr const char* kToolVersion = "0.1.0";

struct StageContext {
    std::string config_path;
    std::string out_dir;
    unsigned threads = 1;
};

// Dispatches one subcommand; throws ConfigError/ValidationError for bad
// input (CLI exit 1) and NumericalError for numerical failures (exit 2).
void run_stage(const std::string& command, const StageContext& ctx);

const std::vector<std::string>& stage_names();

// design.csv and longitudinal.csv round-trips (absent blocks and degenerate
// cells are "NA", never zero)
void write_design_csv(const cohort::DesignSet& designs, const std::string& path);
cohort::DesignSet read_design_csv(const std::string& path);

void write_longitudinal_csv(const cohort::FeatureTable& table, const std::string& path);

cohort::FeatureTable feature_table_from_csv(const std::string& path);

std::vector<correspondence::LesionTrack> tracks_from_csv(const std::string& path);

// transforms.json round-trip (per patient: reference series + moving->ref)
struct TransformArchive {
    // patient -> (moving series -> transform); fixed is the reference series
    std::map<std::string, std::map<std::string, registration::RigidTransform>> transforms;
    std::map<std::string, std::string> reference_series;
};
void write_transform_archive(const TransformArchive& archive, const std::string& path);
TransformArchive read_transform_archive(const std::string& path);
correspondence::TransformMap to_transform_map(const TransformArchive& archive);

std::uint64_t fnv1a_file(const std::string& path);

}  // namespace longrad::pipeline
