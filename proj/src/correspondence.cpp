#include "longrad/correspondence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "longrad/csv.hpp"

namespace longrad::correspondence {

using cohort::LesionAnnotation;
using cohort::SourceGroup;
using registration::RigidTransform;

CostMatrix CostMatrix::from_matrix(Eigen::MatrixXd m) {
    CostMatrix c;
    c.distances = std::move(m);
    for (Eigen::Index i = 0; i < c.distances.rows(); ++i)
        c.row_ids.push_back(std::to_string(i));
    for (Eigen::Index j = 0; j < c.distances.cols(); ++j)
        c.col_ids.push_back(std::to_string(j));
    return c;
}

void CostMatrix::validate() const {
    if (static_cast<std::size_t>(distances.rows()) != row_ids.size() ||
        static_cast<std::size_t>(distances.cols()) != col_ids.size())
        throw ValidationError("cost matrix id/shape mismatch");
    for (Eigen::Index i = 0; i < distances.rows(); ++i)
        for (Eigen::Index j = 0; j < distances.cols(); ++j) {
            double v = distances(i, j);
            if (!(v >= 0.0) || !std::isfinite(v))
                throw ValidationError("cost matrix entries must be finite and non-negative");
        }
}

CostMatrix build_cost_matrix(const std::vector<LesionAnnotation>& moving,
                             const std::vector<LesionAnnotation>& fixed,
                             const RigidTransform& t) {
    CostMatrix c;
    c.distances.resize(static_cast<Eigen::Index>(moving.size()),
                       static_cast<Eigen::Index>(fixed.size()));
    for (const auto& a : moving) c.row_ids.push_back(a.lesion_label);
    for (const auto& a : fixed) c.col_ids.push_back(a.lesion_label);
    for (std::size_t i = 0; i < moving.size(); ++i) {
        Eigen::Vector3d p = registration::apply_transform(t, moving[i].centroid);
        for (std::size_t j = 0; j < fixed.size(); ++j)
            c.distances(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                (p - fixed[j].centroid).norm();
    }
    return c;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// O(n^3) Hungarian algorithm with potentials; exact optimum on a square
// matrix. Returns row -> column.
std::vector<int> solve_square_lap(const Eigen::MatrixXd& a) {
    const int n = static_cast<int>(a.rows());
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, kInf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            int i0 = p[j0], j1 = -1;
            double delta = kInf;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= n; ++j)
        if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

double assignment_cost(const Eigen::MatrixXd& a, const std::vector<int>& row_to_col) {
    double total = 0.0;
    for (std::size_t i = 0; i < row_to_col.size(); ++i) total += a(i, row_to_col[i]);
    return total;
}

// Optimal cost of assigning the remaining rows to the remaining columns.
double lap_cost_on_subset(const Eigen::MatrixXd& a, const std::vector<int>& rows,
                          const std::vector<int>& cols) {
    if (rows.empty()) return 0.0;
    Eigen::MatrixXd sub(rows.size(), cols.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j) sub(i, j) = a(rows[i], cols[j]);
    return assignment_cost(sub, solve_square_lap(sub));
}

}  // namespace

CorrespondenceMap hungarian_match(const CostMatrix& c, double gate_mm) {
    if (!(gate_mm > 0.0)) throw ValidationError("hungarian_match: gate_mm must be positive");
    c.validate();
    CorrespondenceMap out;
    const int m = static_cast<int>(c.distances.rows());
    const int f = static_cast<int>(c.distances.cols());
    if (m == 0 || f == 0) {
        out.unmatched_moving = c.row_ids;
        out.unmatched_fixed = c.col_ids;
        return out;
    }

    // pad with zero-cost dummy rows/columns; dummy assignments mean unmatched
    const int n = std::max(m, f);
    Eigen::MatrixXd padded = Eigen::MatrixXd::Zero(n, n);
    padded.topLeftCorner(m, f) = c.distances;

    double optimum = assignment_cost(padded, solve_square_lap(padded));
    const double tol = 1e-9 * (1.0 + std::fabs(optimum));

    // Rebuild the assignment choosing, row by row, the smallest column index
    // consistent with the optimal total; this pins the lexicographically
    // smallest pair list among equal-cost optima.
    std::vector<int> avail_cols;
    for (int j = 0; j < n; ++j) avail_cols.push_back(j);
    std::vector<int> remaining_rows;
    for (int i = 0; i < n; ++i) remaining_rows.push_back(i);
    std::vector<int> assignment(n, -1);
    double prefix = 0.0;
    for (int i = 0; i < m; ++i) {
        remaining_rows.erase(std::find(remaining_rows.begin(), remaining_rows.end(), i));
        // candidate column order: real columns ascending, then one dummy
        std::vector<int> candidates;
        for (int j : avail_cols)
            if (j < f) candidates.push_back(j);
        for (int j : avail_cols)
            if (j >= f) {
                candidates.push_back(j);
                break;  // dummies are interchangeable
            }
        bool fixed_choice = false;
        for (int j : candidates) {
            std::vector<int> rest_cols;
            for (int jj : avail_cols)
                if (jj != j) rest_cols.push_back(jj);
            double completion = lap_cost_on_subset(padded, remaining_rows, rest_cols);
            if (std::fabs(prefix + padded(i, j) + completion - optimum) <= tol) {
                assignment[i] = j;
                prefix += padded(i, j);
                avail_cols = std::move(rest_cols);
                fixed_choice = true;
                break;
            }
        }
        if (!fixed_choice)
            throw NumericalError("hungarian_match: internal inconsistency reconstructing optimum");
    }

    std::set<int> matched_cols;
    out.total_cost = 0.0;
    for (int i = 0; i < m; ++i) {
        int j = assignment[i];
        if (j >= f) continue;  // dummy column: row unmatched
        double dist = c.distances(i, j);
        if (dist > gate_mm) continue;  // gated: demoted to unmatched on both sides
        MatchedPair p;
        p.moving_index = static_cast<std::size_t>(i);
        p.fixed_index = static_cast<std::size_t>(j);
        p.moving_id = c.row_ids[i];
        p.fixed_id = c.col_ids[j];
        p.distance = dist;
        out.total_cost += dist;
        out.pairs.push_back(std::move(p));
        matched_cols.insert(j);
    }
    for (int i = 0; i < m; ++i) {
        bool in_pairs = false;
        for (const auto& p : out.pairs)
            if (p.moving_index == static_cast<std::size_t>(i)) in_pairs = true;
        if (!in_pairs) out.unmatched_moving.push_back(c.row_ids[i]);
    }
    for (int j = 0; j < f; ++j)
        if (!matched_cols.count(j)) out.unmatched_fixed.push_back(c.col_ids[j]);
    return out;
}

std::string to_string(TrackStatus s) {
    switch (s) {
        case TrackStatus::Present: return "present";
        case TrackStatus::New: return "new";
        case TrackStatus::Disappeared: return "disappeared";
    }
    return "?";
}

namespace {

struct Unit {
    std::vector<TrackMember> members;
    Eigen::Vector3d centroid;
    std::string sort_key;
};

}  // namespace

std::vector<LesionTrack> build_tracks(const cohort::Cohort& cohort, const TransformMap& transforms,
                                      double gate_mm) {
    std::vector<LesionTrack> tracks;

    for (const auto& patient : cohort.patients) {
        auto anns = cohort.annotations_for(patient.id);
        if (anns.empty()) continue;

        std::vector<int> observed_tps;
        for (const auto* a : anns) {
            if (std::find(observed_tps.begin(), observed_tps.end(), a->timepoint.index()) ==
                observed_tps.end())
                observed_tps.push_back(a->timepoint.index());
        }
        std::sort(observed_tps.begin(), observed_tps.end());

        // reference frame: lexicographically smallest series at the earliest
        // annotated timepoint
        std::string reference_series;
        for (const auto* a : anns) {
            if (a->timepoint.index() != observed_tps.front()) continue;
            if (reference_series.empty() || a->series_id < reference_series)
                reference_series = a->series_id;
        }

        auto to_reference = [&](const LesionAnnotation& a) -> Eigen::Vector3d {
            if (a.series_id == reference_series) return a.centroid;
            auto it = transforms.find({a.series_id, reference_series});
            if (it == transforms.end())
                throw ConfigError("missing rigid transform for series pair (" + a.series_id +
                                  " -> " + reference_series + ")");
            return registration::apply_transform(it->second, a.centroid);
        };

        // per timepoint: reconcile the two annotator groups into units
        std::map<int, std::vector<Unit>> units_by_tp;
        for (int tp : observed_tps) {
            std::vector<const LesionAnnotation*> g1, g2;
            for (const auto* a : anns) {
                if (a->timepoint.index() != tp) continue;
                (a->source_group == SourceGroup::G1 ? g1 : g2).push_back(a);
            }
            auto by_label = [](const LesionAnnotation* a, const LesionAnnotation* b) {
                return a->lesion_label < b->lesion_label;
            };
            std::sort(g1.begin(), g1.end(), by_label);
            std::sort(g2.begin(), g2.end(), by_label);

            std::vector<Unit> units;
            auto single = [&](const LesionAnnotation* a) {
                Unit u;
                u.members.push_back(TrackMember{a->source_group, a->lesion_label, 0.0, false});
                u.centroid = to_reference(*a);
                u.sort_key = to_string(a->source_group) + ":" + a->lesion_label;
                return u;
            };
            if (g1.empty() || g2.empty()) {
                for (const auto* a : g1) units.push_back(single(a));
                for (const auto* a : g2) units.push_back(single(a));
            } else {
                CostMatrix cm;
                cm.distances.resize(static_cast<Eigen::Index>(g1.size()),
                                    static_cast<Eigen::Index>(g2.size()));
                for (const auto* a : g1) cm.row_ids.push_back(a->lesion_label);
                for (const auto* a : g2) cm.col_ids.push_back(a->lesion_label);
                std::vector<Eigen::Vector3d> p1, p2;
                for (const auto* a : g1) p1.push_back(to_reference(*a));
                for (const auto* a : g2) p2.push_back(to_reference(*a));
                for (std::size_t i = 0; i < g1.size(); ++i)
                    for (std::size_t j = 0; j < g2.size(); ++j)
                        cm.distances(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                            (p1[i] - p2[j]).norm();
                CorrespondenceMap rec = hungarian_match(cm, gate_mm);
                std::set<std::size_t> used1, used2;
                for (const auto& pr : rec.pairs) {
                    Unit u;
                    u.members.push_back(TrackMember{SourceGroup::G1,
                                                    g1[pr.moving_index]->lesion_label, 0.0, false});
                    u.members.push_back(TrackMember{SourceGroup::G2,
                                                    g2[pr.fixed_index]->lesion_label, 0.0, false});
                    u.centroid = 0.5 * (p1[pr.moving_index] + p2[pr.fixed_index]);
                    u.sort_key = "G1:" + g1[pr.moving_index]->lesion_label;
                    units.push_back(std::move(u));
                    used1.insert(pr.moving_index);
                    used2.insert(pr.fixed_index);
                }
                for (std::size_t i = 0; i < g1.size(); ++i)
                    if (!used1.count(i)) units.push_back(single(g1[i]));
                for (std::size_t j = 0; j < g2.size(); ++j)
                    if (!used2.count(j)) units.push_back(single(g2[j]));
            }
            std::sort(units.begin(), units.end(),
                      [](const Unit& a, const Unit& b) { return a.sort_key < b.sort_key; });
            units_by_tp[tp] = std::move(units);
        }

        // chain forward from the earliest timepoint
        struct Active {
            std::size_t track_index;
            Eigen::Vector3d position;
        };
        std::vector<Active> active;
        std::size_t patient_track_count = 0;
        auto new_track = [&](int tp, const Unit& u, bool is_new, double link_dist,
                             bool has_link) -> std::size_t {
            LesionTrack t;
            t.patient_id = patient.id;
            char buf[16];
            std::snprintf(buf, sizeof(buf), "T%02zu", ++patient_track_count);
            t.track_id = buf;
            t.members[tp] = u.members;
            for (auto& mb : t.members[tp]) {
                mb.matched_distance_mm = link_dist;
                mb.has_matched_distance = has_link;
            }
            t.status[tp] = is_new ? TrackStatus::New : TrackStatus::Present;
            t.centroid[tp] = u.centroid;
            tracks.push_back(std::move(t));
            return tracks.size() - 1;
        };

        for (std::size_t tpi = 0; tpi < observed_tps.size(); ++tpi) {
            int tp = observed_tps[tpi];
            const auto& units = units_by_tp[tp];
            if (tpi == 0) {
                for (const auto& u : units)
                    active.push_back({new_track(tp, u, false, 0.0, false), u.centroid});
                continue;
            }
            CostMatrix cm;
            cm.distances.resize(static_cast<Eigen::Index>(active.size()),
                                static_cast<Eigen::Index>(units.size()));
            for (std::size_t i = 0; i < active.size(); ++i)
                cm.row_ids.push_back(tracks[active[i].track_index].track_id);
            for (std::size_t j = 0; j < units.size(); ++j) cm.col_ids.push_back(units[j].sort_key);
            for (std::size_t i = 0; i < active.size(); ++i)
                for (std::size_t j = 0; j < units.size(); ++j)
                    cm.distances(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                        (active[i].position - units[j].centroid).norm();
            CorrespondenceMap link = hungarian_match(cm, gate_mm);

            std::vector<Active> next_active;
            std::set<std::size_t> linked_tracks, linked_units;
            for (const auto& pr : link.pairs) {
                LesionTrack& t = tracks[active[pr.moving_index].track_index];
                const Unit& u = units[pr.fixed_index];
                t.members[tp] = u.members;
                for (auto& mb : t.members[tp]) {
                    mb.matched_distance_mm = pr.distance;
                    mb.has_matched_distance = true;
                }
                t.status[tp] = TrackStatus::Present;
                t.centroid[tp] = u.centroid;
                next_active.push_back({active[pr.moving_index].track_index, u.centroid});
                linked_tracks.insert(pr.moving_index);
                linked_units.insert(pr.fixed_index);
            }
            for (std::size_t i = 0; i < active.size(); ++i) {
                if (linked_tracks.count(i)) continue;
                tracks[active[i].track_index].status[tp] = TrackStatus::Disappeared;
            }
            for (std::size_t j = 0; j < units.size(); ++j) {
                if (linked_units.count(j)) continue;
                next_active.push_back({new_track(tp, units[j], true, 0.0, false),
                                       units[j].centroid});
            }
            // keep deterministic track ordering for the next cost matrix
            std::sort(next_active.begin(), next_active.end(), [&](const Active& a, const Active& b) {
                return tracks[a.track_index].track_id < tracks[b.track_index].track_id;
            });
            active = std::move(next_active);
        }
    }
    return tracks;
}

std::string tracks_to_csv(const std::vector<LesionTrack>& tracks) {
    CsvTable t(std::vector<std::string>{"patient_id", "track_id", "timepoint", "source_group",
                                        "lesion_label", "status", "matched_distance_mm"});
    for (const auto& tr : tracks) {
        std::set<int> tps;
        for (const auto& [tp, m] : tr.members) tps.insert(tp);
        for (const auto& [tp, s] : tr.status) tps.insert(tp);
        for (int tp : tps) {
            std::string label = cohort::Timepoint::from_index(tp).label();
            auto st = tr.status.find(tp);
            std::string status_str = st != tr.status.end() ? to_string(st->second) : "present";
            auto mit = tr.members.find(tp);
            if (mit == tr.members.end()) {
                t.add_row({tr.patient_id, tr.track_id, label, "", "", status_str, ""});
                continue;
            }
            for (const auto& mb : mit->second) {
                t.add_row({tr.patient_id, tr.track_id, label, cohort::to_string(mb.group),
                           mb.lesion_label, status_str,
                           mb.has_matched_distance ? num17(mb.matched_distance_mm) : ""});
            }
        }
    }
    return t.to_string();
}

}  // namespace longrad::correspondence
