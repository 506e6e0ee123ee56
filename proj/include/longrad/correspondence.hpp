#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "longrad/cohort.hpp"
#include "longrad/registration.hpp"

namespace longrad::correspondence {

struct CostMatrix {
    std::vector<std::string> row_ids;  // moving lesion ids
    std::vector<std::string> col_ids;  // fixed lesion ids
    Eigen::MatrixXd distances;         // mm, rows x cols

    static CostMatrix from_matrix(Eigen::MatrixXd m);
    void validate() const;
};

struct MatchedPair {
    std::size_t moving_index = 0;
    std::size_t fixed_index = 0;
    std::string moving_id;
    std::string fixed_id;
    double distance = 0.0;
};

struct CorrespondenceMap {
    std::vector<MatchedPair> pairs;  // ascending moving index
    std::vector<std::string> unmatched_moving;
    std::vector<std::string> unmatched_fixed;
    double total_cost = 0.0;
};

CostMatrix build_cost_matrix(const std::vector<cohort::LesionAnnotation>& moving,
                             const std::vector<cohort::LesionAnnotation>& fixed,
                             const registration::RigidTransform& t);

// Minimum-cost one-to-one assignment (rectangular input padded with dummy
// nodes). Assigned pairs farther than gate_mm are demoted to unmatched on
// both sides; among equal-cost optima the lexicographically smallest pair
// list is returned.
CorrespondenceMap hungarian_match(const CostMatrix& c, double gate_mm);

enum class TrackStatus { Present, New, Disappeared };
std::string to_string(TrackStatus s);

struct TrackMember {
    cohort::SourceGroup group = cohort::SourceGroup::G1;
    std::string lesion_label;
    // distance of the consecutive-timepoint link that brought this
    // timepoint's unit into the track; absent at first appearance
    double matched_distance_mm = 0.0;
    bool has_matched_distance = false;
};

struct LesionTrack {
    std::string patient_id;
    std::string track_id;
    std::map<int, std::vector<TrackMember>> members;  // timepoint index -> members
    std::map<int, TrackStatus> status;
    // centroid in the patient reference frame at each member timepoint
    std::map<int, Eigen::Vector3d> centroid;
};

// Keyed (moving_series, fixed_series); identity is implied for equal ids.
using TransformMap = std::map<std::pair<std::string, std::string>, registration::RigidTransform>;

// Chains consecutive-timepoint matches from the earliest timepoint forward,
// reconciling two-annotator lesions at each timepoint first. All centroids
// are mapped into the patient reference frame (lexicographically smallest
// series at the earliest annotated timepoint).
std::vector<LesionTrack> build_tracks(const cohort::Cohort& cohort, const TransformMap& transforms,
                                      double gate_mm);

inline constexpr double kDefaultGateMm = 30.0;

std::string tracks_to_csv(const std::vector<LesionTrack>& tracks);

}  // namespace longrad::correspondence
