#include "longrad/simcohort.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

#include "longrad/radiomics.hpp"
#include "longrad/rng.hpp"
#include "nlohmann/json.hpp"

using nlohmann::json;

namespace longrad::simcohort {

using cohort::Cohort;
using cohort::ImageVolume;
using cohort::LesionAnnotation;
using cohort::MaskRaster;
using cohort::SourceGroup;
using cohort::Timepoint;
using registration::RigidTransform;

namespace {

std::string patient_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "P%03d", i);
    return buf;
}

struct LesionGeometry {
    Eigen::Vector3d center;        // anatomy (reference) frame, mm
    Eigen::Vector3d semi_axes;     // mm at Screening
    std::array<double, 4> scale;   // per-timepoint size factor
    int appear_tp = 0;
    int vanish_tp = 4;             // absent from this timepoint on
    bool present_at(int tp) const { return tp >= appear_tp && tp < vanish_tp; }
};

struct BackgroundBlob {
    Eigen::Vector3d center;
    double sigma;
    double amplitude;
};

double anatomy_intensity(const Eigen::Vector3d& p, const std::vector<BackgroundBlob>& blobs,
                         const std::vector<LesionGeometry>& lesions, int tp) {
    double v = -40.0 + 0.15 * p[0] + 0.05 * p[1];
    for (const auto& b : blobs) {
        double r2 = (p - b.center).squaredNorm();
        v += b.amplitude * std::exp(-0.5 * r2 / (b.sigma * b.sigma));
    }
    for (const auto& l : lesions) {
        if (!l.present_at(tp)) continue;
        double s = l.scale[static_cast<std::size_t>(tp)];
        double q = 0.0;
        for (int d = 0; d < 3; ++d) {
            double rel = (p[d] - l.center[d]) / (l.semi_axes[d] * s);
            q += rel * rel;
        }
        if (q < 1.0) v += 120.0 * (1.0 - q);
    }
    return v;
}

RigidTransform random_rigid(Rng& rng, double trans_mm, double rot_deg) {
    auto angle = [&] { return rng.uniform(-rot_deg, rot_deg) * M_PI / 180.0; };
    double ax = angle(), ay = angle(), az = angle();
    Eigen::Matrix3d rx, ry, rz;
    rx << 1, 0, 0, 0, std::cos(ax), -std::sin(ax), 0, std::sin(ax), std::cos(ax);
    ry << std::cos(ay), 0, std::sin(ay), 0, 1, 0, -std::sin(ay), 0, std::cos(ay);
    rz << std::cos(az), -std::sin(az), 0, std::sin(az), std::cos(az), 0, 0, 0, 1;
    RigidTransform t;
    t.rotation = rz * ry * rx;
    t.translation = {rng.uniform(-trans_mm, trans_mm), rng.uniform(-trans_mm, trans_mm),
                     rng.uniform(-trans_mm, trans_mm)};
    return t;
}

cohort::Demographics random_demographics(Rng& rng) {
    cohort::Demographics d;
    d.values[0] = rng.bernoulli(0.40) ? 1.0 : 0.0;  // LIVERBL
    d.values[1] = rng.bernoulli(0.35) ? 1.0 : 0.0;  // PRENGR1
    d.values[2] = rng.bernoulli(0.50) ? 1.0 : 0.0;  // ENDSNBL
    d.values[3] = std::max(5.0, rng.normal(30.0, 8.0));    // AST
    d.values[4] = std::max(20.0, rng.normal(95.0, 25.0));  // ALP
    d.values[5] = std::clamp(rng.normal(58.0, 10.0), 25.0, 90.0);  // Age
    d.values[6] = rng.bernoulli(0.3) ? 1.0 : 0.0;   // Denovo
    d.values[7] = std::max(7.0, rng.normal(12.5, 1.5));    // HGB
    d.values[8] = rng.bernoulli(0.5) ? 1.0 : 0.0;   // ARM
    return d;
}

// Calibrate the exponential censoring rate so the realized censored fraction
// matches the target; monotone in the rate, so bisection is exact up to 1/n.
std::vector<int> calibrate_censoring(const std::vector<double>& event_times,
                                     const std::vector<double>& censor_quantiles,
                                     double target_rate, std::vector<double>& final_times) {
    const std::size_t n = event_times.size();
    auto realize = [&](double rate, std::vector<int>& events, std::vector<double>& times) {
        int censored = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double c = rate > 0 ? -std::log(1.0 - censor_quantiles[i]) / rate : 1e300;
            if (c < event_times[i]) {
                times[i] = c;
                events[i] = 0;
                ++censored;
            } else {
                times[i] = event_times[i];
                events[i] = 1;
            }
        }
        return static_cast<double>(censored) / static_cast<double>(n);
    };
    std::vector<int> events(n);
    final_times.assign(n, 0.0);
    if (target_rate <= 0.0) {
        realize(0.0, events, final_times);
        return events;
    }
    double lo = 1e-8, hi = 1.0;
    while (realize(hi, events, final_times) < target_rate && hi < 1e6) hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        if (realize(mid, events, final_times) < target_rate)
            lo = mid;
        else
            hi = mid;
    }
    realize(hi, events, final_times);
    return events;
}

}  // namespace

std::pair<Cohort, GroundTruth> generate_cohort(const SimConfig& cfg) {
    if (cfg.n_patients < 1) throw ValidationError("generate_cohort: n_patients must be >= 1");
    if (cfg.lesions_min < 1 || cfg.lesions_max < cfg.lesions_min)
        throw ValidationError("generate_cohort: bad lesion count range");

    Cohort cohort_out;
    GroundTruth truth;
    truth.seed = cfg.seed;
    truth.censoring_rate_target = cfg.censoring_rate;

    const int dim = cfg.phantom_dim;
    const double sp = cfg.phantom_spacing_mm;
    const double extent = sp * (dim - 1);
    const double margin = 0.28 * extent;
    const double min_separation = 22.0;

    struct PatientSim {
        std::vector<LesionGeometry> lesions;
        std::vector<BackgroundBlob> blobs;
        std::array<RigidTransform, 4> series_to_reference;  // per timepoint
        cohort::Demographics demographics;
    };
    std::vector<PatientSim> sims(static_cast<std::size_t>(cfg.n_patients));

    for (int pi = 0; pi < cfg.n_patients; ++pi) {
        Rng rng = Rng::substream(cfg.seed, "patient", static_cast<std::uint64_t>(pi));
        PatientSim& sim = sims[static_cast<std::size_t>(pi)];
        sim.demographics = random_demographics(rng);
        double arm = sim.demographics.arm();

        int n_lesions = cfg.lesions_min +
                        static_cast<int>(rng.uniform_index(
                            static_cast<std::uint64_t>(cfg.lesions_max - cfg.lesions_min + 1)));
        for (int li = 0; li < n_lesions; ++li) {
            LesionGeometry g;
            for (int attempt = 0; attempt < 500; ++attempt) {
                g.center = {rng.uniform(margin, extent - margin),
                            rng.uniform(margin, extent - margin),
                            rng.uniform(margin, extent - margin)};
                bool ok = true;
                for (const auto& other : sim.lesions)
                    if ((g.center - other.center).norm() < min_separation) ok = false;
                if (ok) break;
                if (attempt == 499)
                    throw NumericalError(
                        "generate_cohort: cannot place lesions with the required separation "
                        "inside the phantom");
            }
            g.semi_axes = {rng.uniform(6.0, 11.0), rng.uniform(6.0, 11.0),
                           rng.uniform(6.0, 11.0)};
            double shrink = arm > 0.5 ? rng.uniform(0.25, 0.55) : rng.uniform(-0.05, 0.20);
            for (int tp = 0; tp < 4; ++tp) {
                double tfrac = Timepoint::from_index(tp).days() / 168.0;
                g.scale[static_cast<std::size_t>(tp)] =
                    std::exp(-shrink * tfrac + rng.normal(0.0, 0.03));
            }
            if (cfg.lesion_appear_prob > 0 && rng.bernoulli(cfg.lesion_appear_prob))
                g.appear_tp = 1 + static_cast<int>(rng.uniform_index(3));
            if (cfg.lesion_vanish_prob > 0 && rng.bernoulli(cfg.lesion_vanish_prob)) {
                g.vanish_tp = std::max(g.appear_tp + 1,
                                       1 + static_cast<int>(rng.uniform_index(4)));
            }
            sim.lesions.push_back(g);
        }
        // first lesion always spans the study so every patient has a Screening lesion
        sim.lesions[0].appear_tp = 0;
        sim.lesions[0].vanish_tp = 4;

        for (int bi = 0; bi < 6; ++bi)
            sim.blobs.push_back({{rng.uniform(0.0, extent), rng.uniform(0.0, extent),
                                  rng.uniform(0.0, extent)},
                                 rng.uniform(10.0, 25.0),
                                 rng.uniform(40.0, 90.0)});

        sim.series_to_reference[0] = RigidTransform::identity();
        for (int tp = 1; tp < 4; ++tp)
            sim.series_to_reference[tp] =
                random_rigid(rng, cfg.transform_translation_mm, cfg.transform_rotation_deg);

        bool two_groups = rng.bernoulli(cfg.two_group_fraction);
        std::string pid = patient_name(pi);
        std::string ref_series = pid + "_T0";
        truth.reference_series[pid] = ref_series;

        for (int tp = 0; tp < 4; ++tp) {
            std::string series = pid + "_T" + std::to_string(tp);
            const RigidTransform& to_ref = sim.series_to_reference[static_cast<std::size_t>(tp)];
            RigidTransform from_ref = registration::inverse(to_ref);
            if (tp != 0) truth.true_transforms[{series, ref_series}] = to_ref;

            ImageVolume vol;
            vol.dims = {dim, dim, dim};
            vol.spacing = {sp, sp, sp};
            vol.origin = {0.0, 0.0, 0.0};
            vol.voxels.resize(vol.voxel_count());
            for (int k = 0; k < dim; ++k)
                for (int j = 0; j < dim; ++j)
                    for (int i = 0; i < dim; ++i) {
                        Eigen::Vector3d p_series = vol.physical(i, j, k);
                        Eigen::Vector3d p_anat =
                            registration::apply_transform(to_ref, p_series);
                        vol.at(i, j, k) = static_cast<float>(
                            anatomy_intensity(p_anat, sim.blobs, sim.lesions, tp));
                    }
            cohort_out.volumes.emplace(series, std::move(vol));
            const ImageVolume& volume = cohort_out.volumes.at(series);

            std::vector<int> present;
            for (std::size_t li = 0; li < sim.lesions.size(); ++li)
                if (sim.lesions[li].present_at(tp)) present.push_back(static_cast<int>(li));
            if (present.empty()) continue;

            int n_groups = two_groups ? 2 : 1;
            for (int gi = 0; gi < n_groups; ++gi) {
                SourceGroup group = gi == 0 ? SourceGroup::G1 : SourceGroup::G2;
                std::vector<int> label_order(present.size());
                std::iota(label_order.begin(), label_order.end(), 0);
                if (cfg.shuffle_labels) {
                    Rng lab = Rng::substream(cfg.seed, "labels-" + series + "-" +
                                                           cohort::to_string(group));
                    lab.shuffle(label_order);
                }
                Rng jit = Rng::substream(cfg.seed, "jitter-" + series + "-" +
                                                       cohort::to_string(group));
                for (std::size_t a = 0; a < present.size(); ++a) {
                    int li = present[a];
                    const LesionGeometry& g = sim.lesions[static_cast<std::size_t>(li)];
                    double scale = g.scale[static_cast<std::size_t>(tp)];
                    Eigen::Vector3d center_series =
                        registration::apply_transform(from_ref, g.center);

                    LesionAnnotation ann;
                    ann.patient_id = pid;
                    ann.timepoint = Timepoint::from_index(tp);
                    ann.source_group = group;
                    ann.series_id = series;
                    ann.lesion_label = "L" + std::to_string(label_order[a] + 1);
                    Eigen::Vector3d jitter(jit.normal(0.0, cfg.jitter_mm),
                                           jit.normal(0.0, cfg.jitter_mm),
                                           jit.normal(0.0, cfg.jitter_mm));
                    if (cfg.jitter_mm == 0.0) jitter.setZero();
                    ann.centroid = center_series + jitter;
                    for (int d = 0; d < 3; ++d)
                        ann.centroid[d] = std::clamp(ann.centroid[d], 0.0, extent);

                    Eigen::Vector3d ci = volume.continuous_index(center_series);
                    int slice = std::clamp(static_cast<int>(std::lround(ci[2])), 0, dim - 1);
                    ann.slice_index = slice;

                    // elliptical mask on the annotated slice; cross-section of
                    // the rotated ellipsoid approximated by the in-plane axes
                    MaskRaster mask;
                    mask.width = dim;
                    mask.height = dim;
                    mask.data.assign(static_cast<std::size_t>(dim) * dim, 0);
                    mask.spacing = {sp, sp};
                    mask.origin = {0.0, 0.0};
                    double dz = (slice - ci[2]) * sp;
                    double az = g.semi_axes[2] * scale;
                    double cross = 1.0 - (dz * dz) / (az * az);
                    if (cross <= 0.02) cross = 0.02;
                    double rx = g.semi_axes[0] * scale * std::sqrt(cross);
                    double ry = g.semi_axes[1] * scale * std::sqrt(cross);
                    rx = std::max(rx, 1.6 * sp);
                    ry = std::max(ry, 1.6 * sp);
                    for (int y = 0; y < dim; ++y)
                        for (int x = 0; x < dim; ++x) {
                            double ddx = (x - ci[0]) * sp / rx;
                            double ddy = (y - ci[1]) * sp / ry;
                            if (ddx * ddx + ddy * ddy <= 1.0) mask.set(x, y, true);
                        }
                    if (mask.pixel_count() < 2) {
                        int cx = std::clamp(static_cast<int>(std::lround(ci[0])), 1, dim - 2);
                        int cy = std::clamp(static_cast<int>(std::lround(ci[1])), 1, dim - 2);
                        mask.set(cx, cy, true);
                        mask.set(cx + 1, cy, true);
                        mask.set(cx, cy + 1, true);
                    }
                    ann.mask = mask;
                    ann.mask_id = series + "_" + cohort::to_string(group) + "_" +
                                  ann.lesion_label;
                    truth.true_lesion[{pid, tp, cohort::to_string(group), ann.lesion_label}] = li;
                    cohort_out.annotations.push_back(std::move(ann));
                }
            }
        }
    }

    // survival outcomes: hazard linear in the planted z-scored signal features
    std::vector<double> lp(static_cast<std::size_t>(cfg.n_patients), 0.0);
    if (!cfg.signal.empty()) {
        // realized aggregated features per patient per timepoint (G1 lesions)
        radiomics::GlcmConfig glcm_cfg;
        std::map<std::string, std::array<std::map<std::string, double>, 4>> agg;
        for (const auto& ann : cohort_out.annotations) {
            if (ann.source_group != SourceGroup::G1) continue;
            const auto& vol = cohort_out.volumes.at(ann.series_id);
            radiomics::Slice2D slice = radiomics::slice_of(vol, ann.slice_index);
            radiomics::FeatureVector fv = radiomics::compute_lesion_features(
                ann.mask, slice, Eigen::Vector2d(vol.spacing[0], vol.spacing[1]), glcm_cfg);
            auto& per_tp = agg[ann.patient_id][static_cast<std::size_t>(ann.timepoint.index())];
            for (const auto& [name, entry] : cfg.signal) {
                if (fv.is_degenerate(name)) continue;
                per_tp[name + "#sum"] += fv.value_of(name);
                per_tp[name + "#n"] += 1.0;
            }
        }
        // z-score each signal column across patients, then accumulate the lp
        for (const auto& [name, entry] : cfg.signal) {
            std::array<std::vector<double>, 4> col;
            std::vector<std::string> pids;
            for (int pi = 0; pi < cfg.n_patients; ++pi) pids.push_back(patient_name(pi));
            for (int tp = 0; tp < 4; ++tp) {
                col[static_cast<std::size_t>(tp)].assign(pids.size(),
                                                          std::numeric_limits<double>::quiet_NaN());
                for (std::size_t i = 0; i < pids.size(); ++i) {
                    auto pit = agg.find(pids[i]);
                    if (pit == agg.end()) continue;
                    const auto& m = pit->second[static_cast<std::size_t>(tp)];
                    auto sit = m.find(name + "#sum");
                    auto nit = m.find(name + "#n");
                    if (sit == m.end() || nit == m.end() || nit->second <= 0) continue;
                    col[static_cast<std::size_t>(tp)][i] = sit->second / nit->second;
                }
            }
            auto zscore = [](std::vector<double> v) {
                double s = 0, s2 = 0;
                int n = 0;
                for (double x : v)
                    if (std::isfinite(x)) {
                        s += x;
                        s2 += x * x;
                        ++n;
                    }
                if (n < 2) return v;
                double mean = s / n;
                double sd = std::sqrt(std::max(s2 / n - mean * mean, 1e-12));
                for (auto& x : v) x = std::isfinite(x) ? (x - mean) / sd : 0.0;
                return v;
            };
            std::vector<double> base = zscore(col[0]);
            for (std::size_t i = 0; i < base.size(); ++i)
                lp[i] += entry.baseline_log_hr * base[i];
            for (int tp = 1; tp < 4; ++tp) {
                std::vector<double> ratio(base.size(),
                                          std::numeric_limits<double>::quiet_NaN());
                for (std::size_t i = 0; i < base.size(); ++i)
                    if (std::isfinite(col[static_cast<std::size_t>(tp)][i]) &&
                        std::isfinite(col[0][i]) && std::fabs(col[0][i]) > 1e-12)
                        ratio[i] = col[static_cast<std::size_t>(tp)][i] / col[0][i];
                std::vector<double> z = zscore(ratio);
                for (std::size_t i = 0; i < z.size(); ++i)
                    lp[i] += entry.delta_log_hr[static_cast<std::size_t>(tp - 1)] * z[i];
            }
        }
    }

    Rng surv_rng = Rng::substream(cfg.seed, "survival");
    std::vector<double> event_times(lp.size()), censor_q(lp.size());
    for (std::size_t i = 0; i < lp.size(); ++i) {
        double rate = cfg.baseline_hazard_per_day * std::exp(lp[i]);
        event_times[i] = surv_rng.exponential(rate);
        censor_q[i] = surv_rng.uniform();
    }
    std::vector<double> final_times;
    std::vector<int> events = calibrate_censoring(event_times, censor_q, cfg.censoring_rate,
                                                  final_times);
    int censored = 0;
    for (int pi = 0; pi < cfg.n_patients; ++pi) {
        std::string pid = patient_name(pi);
        cohort::Patient p;
        p.id = pid;
        p.demographics = sims[static_cast<std::size_t>(pi)].demographics;
        p.outcome.time_days = std::max(final_times[static_cast<std::size_t>(pi)], 1.0);
        p.outcome.event = events[static_cast<std::size_t>(pi)];
        censored += 1 - p.outcome.event;
        truth.true_linear_predictor[pid] = lp[static_cast<std::size_t>(pi)];
        cohort_out.patients.push_back(std::move(p));
    }
    truth.realized_censoring_rate = static_cast<double>(censored) / cfg.n_patients;
    return {std::move(cohort_out), std::move(truth)};
}

void save_truth(const GroundTruth& truth, const std::string& path) {
    json j;
    j["seed"] = truth.seed;
    j["censoring_rate_target"] = truth.censoring_rate_target;
    j["realized_censoring_rate"] = truth.realized_censoring_rate;
    json lesions = json::array();
    for (const auto& [key, lesion] : truth.true_lesion) {
        lesions.push_back({{"patient_id", std::get<0>(key)},
                           {"timepoint", Timepoint::from_index(std::get<1>(key)).label()},
                           {"source_group", std::get<2>(key)},
                           {"lesion_label", std::get<3>(key)},
                           {"true_lesion", lesion}});
    }
    j["annotation_truth"] = lesions;
    json transforms = json::array();
    for (const auto& [key, t] : truth.true_transforms) {
        std::vector<double> rot(9);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) rot[r * 3 + c] = t.rotation(r, c);
        transforms.push_back({{"moving", key.first},
                              {"fixed", key.second},
                              {"rotation", rot},
                              {"translation", {t.translation[0], t.translation[1],
                                               t.translation[2]}}});
    }
    j["transforms"] = transforms;
    json lps = json::object();
    for (const auto& [pid, v] : truth.true_linear_predictor) lps[pid] = v;
    j["linear_predictor"] = lps;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write truth file: " + path);
    out << j.dump(2) << "\n";
}

double score_tracking(const std::vector<correspondence::LesionTrack>& tracks,
                      const GroundTruth& truth) {
    // true lesion id of a track at a timepoint: unanimous over members or -1
    auto track_lesion_at = [&](const correspondence::LesionTrack& t, int tp) -> int {
        auto it = t.members.find(tp);
        if (it == t.members.end()) return -1;
        int id = -2;
        for (const auto& mb : it->second) {
            auto key = std::make_tuple(t.patient_id, tp, cohort::to_string(mb.group),
                                       mb.lesion_label);
            auto tit = truth.true_lesion.find(key);
            if (tit == truth.true_lesion.end())
                throw ValidationError("score_tracking: annotation missing from ground truth (" +
                                      t.patient_id + ", " + mb.lesion_label + ")");
            if (id == -2)
                id = tit->second;
            else if (id != tit->second)
                return -1;  // cross-group reconciliation merged two true lesions
        }
        return id;
    };

    // ground-truth links: consecutive annotated timepoints of one true lesion
    std::set<std::tuple<std::string, int, int, int>> true_links;  // patient, lesion, tp1, tp2
    {
        std::map<std::pair<std::string, int>, std::set<int>> tps_of_lesion;
        for (const auto& [key, lesion] : truth.true_lesion)
            tps_of_lesion[{std::get<0>(key), lesion}].insert(std::get<1>(key));
        for (const auto& [key, tps] : tps_of_lesion) {
            std::vector<int> v(tps.begin(), tps.end());
            for (std::size_t i = 0; i + 1 < v.size(); ++i)
                true_links.insert({key.first, key.second, v[i], v[i + 1]});
        }
    }
    if (true_links.empty()) throw ValidationError("score_tracking: ground truth has no links");

    std::size_t correct = 0;
    for (const auto& [pid, lesion, tp1, tp2] : true_links) {
        for (const auto& t : tracks) {
            if (t.patient_id != pid) continue;
            if (track_lesion_at(t, tp1) == lesion && track_lesion_at(t, tp2) == lesion) {
                ++correct;
                break;
            }
        }
    }
    return static_cast<double>(correct) / static_cast<double>(true_links.size());
}

std::pair<cohort::DesignSet, DesignTruth> generate_design(const DesignSimConfig& cfg) {
    if (cfg.n_patients < 2) throw ValidationError("generate_design: need at least 2 patients");
    if (cfg.n_features < 1 ||
        cfg.n_features > static_cast<int>(radiomics::internal_feature_names().size()))
        throw ValidationError("generate_design: n_features out of range");

    cohort::DesignSet designs;
    designs.max_timepoint = Timepoint::from_index(3);
    for (int f = 0; f < cfg.n_features; ++f)
        designs.feature_names.push_back(radiomics::internal_feature_names()[
            static_cast<std::size_t>(f)]);
    for (const auto& [name, entry] : cfg.signal)
        if (std::find(designs.feature_names.begin(), designs.feature_names.end(), name) ==
            designs.feature_names.end())
            throw ValidationError("generate_design: signal feature '" + name +
                                  "' not among the generated features");

    DesignTruth truth;
    truth.feature_names = designs.feature_names;
    truth.signal = cfg.signal;

    const std::size_t nf = designs.feature_names.size();
    const std::size_t n = static_cast<std::size_t>(cfg.n_patients);

    // raw trajectories: baseline lognormal level, delta ratios around an
    // arm-dependent shrink trend
    std::vector<std::vector<double>> x(n, std::vector<double>(nf));
    std::vector<std::array<std::vector<double>, 3>> deltas(n);
    std::vector<cohort::Demographics> dems(n);
    std::vector<std::array<bool, 3>> has_block(n, {true, true, true});

    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = Rng::substream(cfg.seed, "design-patient", i);
        dems[i] = random_demographics(rng);
        double arm = dems[i].arm();
        for (auto& d : deltas[i]) d.assign(nf, 0.0);
        for (std::size_t f = 0; f < nf; ++f) {
            x[i][f] = std::exp(rng.normal(3.0 + 0.1 * static_cast<double>(f % 7), 0.5));
            double shrink = (arm > 0.5 ? cfg.treatment_shrink : 0.0) + rng.normal(0.0, 0.10);
            for (int tp = 1; tp <= 3; ++tp) {
                double tfrac = Timepoint::from_index(tp).days() / 365.0;
                deltas[i][static_cast<std::size_t>(tp - 1)][f] =
                    std::exp(-shrink * tfrac + rng.normal(0.0, 0.20));
            }
        }
        for (int tp = 1; tp <= 3; ++tp)
            if (cfg.dropout_rate[static_cast<std::size_t>(tp - 1)] > 0 &&
                rng.bernoulli(cfg.dropout_rate[static_cast<std::size_t>(tp - 1)]))
                has_block[i][static_cast<std::size_t>(tp - 1)] = false;

    }
    // dropout is monotone: once a block is missing, later blocks are missing
    for (std::size_t i = 0; i < n; ++i)
        for (int tp = 1; tp < 3; ++tp)
            if (!has_block[i][static_cast<std::size_t>(tp - 1)])
                has_block[i][static_cast<std::size_t>(tp)] = false;

    // z-scored log columns drive the hazard
    auto zscore_log = [&](const std::vector<double>& col) {
        std::vector<double> z(col.size());
        double s = 0, s2 = 0;
        for (double v : col) {
            double lv = std::log(std::max(v, 1e-12));
            s += lv;
            s2 += lv * lv;
        }
        double mean = s / static_cast<double>(col.size());
        double sd = std::sqrt(std::max(s2 / static_cast<double>(col.size()) - mean * mean, 1e-12));
        for (std::size_t i = 0; i < col.size(); ++i)
            z[i] = (std::log(std::max(col[i], 1e-12)) - mean) / sd;
        return z;
    };

    std::vector<double> lp(n, 0.0);
    for (const auto& [name, entry] : cfg.signal) {
        std::size_t f = static_cast<std::size_t>(
            std::find(designs.feature_names.begin(), designs.feature_names.end(), name) -
            designs.feature_names.begin());
        std::vector<double> col(n);
        for (std::size_t i = 0; i < n; ++i) col[i] = x[i][f];
        std::vector<double> z = zscore_log(col);
        for (std::size_t i = 0; i < n; ++i) lp[i] += entry.baseline_log_hr * z[i];
        for (int tp = 1; tp <= 3; ++tp) {
            if (entry.delta_log_hr[static_cast<std::size_t>(tp - 1)] == 0.0) continue;
            for (std::size_t i = 0; i < n; ++i)
                col[i] = deltas[i][static_cast<std::size_t>(tp - 1)][f];
            std::vector<double> zd = zscore_log(col);
            for (std::size_t i = 0; i < n; ++i)
                lp[i] += entry.delta_log_hr[static_cast<std::size_t>(tp - 1)] * zd[i];
        }
    }
    truth.linear_predictor = lp;

    Rng surv_rng = Rng::substream(cfg.seed, "design-survival");
    std::vector<double> event_times(n), censor_q(n);
    for (std::size_t i = 0; i < n; ++i) {
        event_times[i] = surv_rng.exponential(cfg.baseline_hazard_per_day * std::exp(lp[i]));
        censor_q[i] = surv_rng.uniform();
    }
    std::vector<double> final_times;
    std::vector<int> events =
        calibrate_censoring(event_times, censor_q, cfg.censoring_rate, final_times);
    int censored = 0;

    for (std::size_t i = 0; i < n; ++i) {
        cohort::PatientDesign d;
        d.patient_id = patient_name(static_cast<int>(i));
        d.x = x[i];
        d.x_degenerate.assign(nf, 0);
        for (int tp = 1; tp <= 3; ++tp) {
            std::size_t bi = static_cast<std::size_t>(tp - 1);
            if (!has_block[i][bi]) continue;
            d.has_delta[bi] = true;
            d.delta[bi] = deltas[i][bi];
            d.delta_degenerate[bi].assign(nf, 0);
        }
        d.demographics = dems[i];
        d.arm = dems[i].arm();
        d.outcome.time_days = std::max(final_times[i], 1.0);
        d.outcome.event = events[i];
        censored += 1 - events[i];
        designs.patients.push_back(std::move(d));
    }
    truth.realized_censoring_rate = static_cast<double>(censored) / static_cast<double>(n);
    return {std::move(designs), std::move(truth)};
}

}  // namespace longrad::simcohort
