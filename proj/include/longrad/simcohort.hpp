#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "longrad/cohort.hpp"
#include "longrad/correspondence.hpp"
#include "longrad/registration.hpp"

namespace longrad::simcohort {

// Hazard signal planted on a named feature: baseline log-HR on the z-scored
// log feature and delta log-HRs on the z-scored log ratios at Weeks 8/16/24.
struct SignalEntry {
    double baseline_log_hr = 0.0;
    std::array<double, 3> delta_log_hr{0.0, 0.0, 0.0};
};

struct SimConfig {
    int n_patients = 20;
    int lesions_min = 2;
    int lesions_max = 4;
    double jitter_mm = 1.0;
    double transform_translation_mm = 5.0;  // per-axis uniform bound
    double transform_rotation_deg = 3.0;
    double censoring_rate = 0.55;
    std::uint64_t seed = 0;
    int phantom_dim = 64;
    double phantom_spacing_mm = 2.0;
    double two_group_fraction = 0.5;  // patients annotated by both groups
    bool shuffle_labels = true;       // inconsistent labels across timepoints
    double lesion_appear_prob = 0.0;  // lesion first seen after Screening
    double lesion_vanish_prob = 0.0;  // lesion absent from some timepoint on
    std::map<std::string, SignalEntry> signal;
    double baseline_hazard_per_day = std::log(2.0) / 300.0;
};

struct GroundTruth {
    // (patient, timepoint, group, label) -> true lesion index
    std::map<std::tuple<std::string, int, std::string, std::string>, int> true_lesion;
    // (moving series, reference series) -> true rigid transform
    correspondence::TransformMap true_transforms;
    std::map<std::string, std::string> reference_series;  // patient -> series
    std::map<std::string, double> true_linear_predictor;  // patient -> hazard lp
    double censoring_rate_target = 0.0;
    double realized_censoring_rate = 0.0;
    std::uint64_t seed = 0;
};

std::pair<cohort::Cohort, GroundTruth> generate_cohort(const SimConfig& cfg);

void save_truth(const GroundTruth& truth, const std::string& path);

// Fraction of true consecutive-timepoint lesion links reproduced by the
// tracks (all members of the linking units must agree on the true lesion).
double score_tracking(const std::vector<correspondence::LesionTrack>& tracks,
                      const GroundTruth& truth);

// Parametric design generator for the modeling stages: feature trajectories
// drawn directly (no imaging), hazard linear in the planted signal.
struct DesignSimConfig {
    int n_patients = 200;
    int n_features = 12;
    std::uint64_t seed = 0;
    double censoring_rate = 0.55;
    std::map<std::string, SignalEntry> signal;
    std::array<double, 3> dropout_rate{0.0, 0.0, 0.0};  // absent delta blocks
    double baseline_hazard_per_day = std::log(2.0) / 300.0;
    double treatment_shrink = 0.25;  // mean extra log-shrink per year on arm=1
};

struct DesignTruth {
    std::vector<std::string> feature_names;
    std::map<std::string, SignalEntry> signal;
    std::vector<double> linear_predictor;  // per patient
    double realized_censoring_rate = 0.0;
};

std::pair<cohort::DesignSet, DesignTruth> generate_design(const DesignSimConfig& cfg);

}  // namespace longrad::simcohort
