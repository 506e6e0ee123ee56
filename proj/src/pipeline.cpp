#include "longrad/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

#include "longrad/rng.hpp"

#include "longrad/csv.hpp"
#include "longrad/jointmodel.hpp"
#include "longrad/parallel.hpp"
#include "longrad/radiomics.hpp"
#include "longrad/report.hpp"
#include "longrad/simcohort.hpp"
#include "longrad/subset.hpp"
#include "longrad/survival.hpp"
#include "nlohmann/json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace longrad::pipeline {

namespace {

constexpr const char* kNA = "NA";

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("missing file: " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write file: " + path);
    out << content;
    if (!out) throw Error("I/O error writing file: " + path);
}

// strict schema check: every config key must be declared for the stage
void validate_keys(const TomlDocument& doc, const std::vector<std::string>& exact,
                   const std::vector<std::string>& prefixes) {
    for (const auto& [key, value] : doc.entries()) {
        if (std::find(exact.begin(), exact.end(), key) != exact.end()) continue;
        bool ok = false;
        for (const auto& p : prefixes)
            if (key.rfind(p, 0) == 0) ok = true;
        if (!ok) throw ConfigError("unknown config key '" + key + "'");
    }
}

double get_float(const TomlDocument& doc, const std::string& key, double fallback) {
    return doc.contains(key) ? doc.at(key).as_float() : fallback;
}
std::int64_t get_int(const TomlDocument& doc, const std::string& key, std::int64_t fallback) {
    return doc.contains(key) ? doc.at(key).as_int() : fallback;
}
bool get_bool(const TomlDocument& doc, const std::string& key, bool fallback) {
    return doc.contains(key) ? doc.at(key).as_bool() : fallback;
}
std::string get_string(const TomlDocument& doc, const std::string& key,
                       const std::string& fallback) {
    return doc.contains(key) ? doc.at(key).as_string() : fallback;
}
std::string require_string(const TomlDocument& doc, const std::string& key) {
    return doc.at(key).as_string();
}

std::string toml_value_repr(const TomlValue& v) {
    if (v.is_string()) return v.as_string();
    if (v.is_bool()) return v.as_bool() ? "true" : "false";
    if (v.is_int()) return std::to_string(v.as_int());
    if (v.is_float()) return num17(v.as_float());
    if (v.is_array()) {
        std::string out = "[";
        for (std::size_t i = 0; i < v.as_array().size(); ++i) {
            if (i) out += ", ";
            out += toml_value_repr(v.as_array()[i]);
        }
        return out + "]";
    }
    return "?";
}

struct ManifestBuilder {
    json j;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    ManifestBuilder(const std::string& command, const TomlDocument& doc,
                    const StageContext& ctx) {
        j["command"] = command;
        j["tool_version"] = kToolVersion;
        j["threads"] = ctx.threads;
        json cfg = json::object();
        for (const auto& [key, value] : doc.entries()) cfg[key] = toml_value_repr(value);
        j["config"] = cfg;
        j["inputs"] = json::object();
        j["seeds"] = json::object();
    }
    void input(const std::string& name, const std::string& path) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(fnv1a_file(path)));
        j["inputs"][name] = {{"path", path}, {"fnv1a64", std::string(buf)}};
    }
    void seed(const std::string& name, std::uint64_t value) { j["seeds"][name] = value; }
    void finish(const std::string& out_dir) {
        auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - start)
                      .count();
        j["elapsed_ms"] = ms;
        write_text((fs::path(out_dir) / "manifest.json").string(), j.dump(2) + "\n");
    }
};

std::map<std::string, simcohort::SignalEntry> parse_signal(const TomlDocument& doc) {
    std::map<std::string, simcohort::SignalEntry> signal;
    for (const auto& [key, value] : doc.entries()) {
        if (key.rfind("signal.", 0) != 0) continue;
        std::string rest = key.substr(7);
        auto dot = rest.rfind('.');
        if (dot == std::string::npos)
            throw ConfigError("malformed signal key '" + key + "'");
        std::string feature = rest.substr(0, dot);
        std::string field = rest.substr(dot + 1);
        auto& entry = signal[feature];
        if (field == "baseline_log_hr")
            entry.baseline_log_hr = value.as_float();
        else if (field == "w8")
            entry.delta_log_hr[0] = value.as_float();
        else if (field == "w16")
            entry.delta_log_hr[1] = value.as_float();
        else if (field == "w24")
            entry.delta_log_hr[2] = value.as_float();
        else
            throw ConfigError("unknown config key '" + key + "'");
    }
    return signal;
}

// ---------------------------------------------------------------------------

void stage_simulate(const TomlDocument& doc, const StageContext& ctx) {
    validate_keys(doc,
                  {"simulate.n_patients", "simulate.lesions_min", "simulate.lesions_max",
                   "simulate.jitter_mm", "simulate.transform_translation_mm",
                   "simulate.transform_rotation_deg", "simulate.censoring_rate", "simulate.seed",
                   "simulate.phantom_dim", "simulate.phantom_spacing_mm",
                   "simulate.two_group_fraction", "simulate.shuffle_labels",
                   "simulate.lesion_appear_prob", "simulate.lesion_vanish_prob"},
                  {"signal."});
    simcohort::SimConfig cfg;
    cfg.n_patients = static_cast<int>(get_int(doc, "simulate.n_patients", 20));
    cfg.lesions_min = static_cast<int>(get_int(doc, "simulate.lesions_min", 2));
    cfg.lesions_max = static_cast<int>(get_int(doc, "simulate.lesions_max", 4));
    cfg.jitter_mm = get_float(doc, "simulate.jitter_mm", 1.0);
    cfg.transform_translation_mm = get_float(doc, "simulate.transform_translation_mm", 5.0);
    cfg.transform_rotation_deg = get_float(doc, "simulate.transform_rotation_deg", 3.0);
    cfg.censoring_rate = get_float(doc, "simulate.censoring_rate", 0.55);
    cfg.seed = static_cast<std::uint64_t>(get_int(doc, "simulate.seed", 0));
    cfg.phantom_dim = static_cast<int>(get_int(doc, "simulate.phantom_dim", 48));
    cfg.phantom_spacing_mm = get_float(doc, "simulate.phantom_spacing_mm", 2.0);
    cfg.two_group_fraction = get_float(doc, "simulate.two_group_fraction", 0.5);
    cfg.shuffle_labels = get_bool(doc, "simulate.shuffle_labels", true);
    cfg.lesion_appear_prob = get_float(doc, "simulate.lesion_appear_prob", 0.0);
    cfg.lesion_vanish_prob = get_float(doc, "simulate.lesion_vanish_prob", 0.0);
    cfg.signal = parse_signal(doc);

    ManifestBuilder manifest("simulate", doc, ctx);
    manifest.seed("simulate", cfg.seed);
    auto [cohort, truth] = simcohort::generate_cohort(cfg);
    cohort::save_cohort(cohort, (fs::path(ctx.out_dir) / "cohort").string());
    simcohort::save_truth(truth, (fs::path(ctx.out_dir) / "truth.json").string());
    manifest.finish(ctx.out_dir);
}

void stage_register(const TomlDocument& doc, const StageContext& ctx) {
    validate_keys(doc,
                  {"register.cohort_dir", "register.pyramid_levels", "register.max_iterations",
                   "register.finest_stride", "register.smoothing_sigma"},
                  {});
    std::string cohort_dir = require_string(doc, "register.cohort_dir");
    registration::IntensityConfig icfg;
    icfg.pyramid_levels = static_cast<int>(get_int(doc, "register.pyramid_levels", 3));
    icfg.max_iterations_per_level =
        static_cast<int>(get_int(doc, "register.max_iterations", 200));
    icfg.finest_stride = static_cast<int>(get_int(doc, "register.finest_stride", 2));
    icfg.smoothing_sigma_voxels = get_float(doc, "register.smoothing_sigma", 1.0);

    ManifestBuilder manifest("register", doc, ctx);
    manifest.input("annotations", (fs::path(cohort_dir) / "annotations.csv").string());
    cohort::Cohort cohort = cohort::load_cohort(cohort_dir);

    struct Task {
        std::string patient_id, moving, reference;
    };
    std::vector<Task> tasks;
    TransformArchive archive;
    for (const auto& p : cohort.patients) {
        auto anns = cohort.annotations_for(p.id);
        if (anns.empty()) continue;
        int first_tp = 4;
        for (const auto* a : anns) first_tp = std::min(first_tp, a->timepoint.index());
        std::string reference;
        std::set<std::string> series;
        for (const auto* a : anns) {
            series.insert(a->series_id);
            if (a->timepoint.index() == first_tp &&
                (reference.empty() || a->series_id < reference))
                reference = a->series_id;
        }
        archive.reference_series[p.id] = reference;
        for (const auto& s : series)
            if (s != reference) tasks.push_back({p.id, s, reference});
    }

    std::vector<registration::RegistrationResult> results(tasks.size());
    parallel_for(tasks.size(), ctx.threads, [&](std::size_t i) {
        results[i] = registration::register_rigid_intensity(
            cohort.volumes.at(tasks[i].reference), cohort.volumes.at(tasks[i].moving), icfg);
    });
    json extra = json::object();
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        archive.transforms[tasks[i].patient_id][tasks[i].moving] = results[i].transform;
        extra[tasks[i].moving] = {{"final_metric", results[i].final_metric},
                                  {"iterations", results[i].iterations},
                                  {"converged", results[i].converged}};
    }
    write_transform_archive(archive, (fs::path(ctx.out_dir) / "transforms.json").string());
    write_text((fs::path(ctx.out_dir) / "registration_report.json").string(),
               extra.dump(2) + "\n");
    manifest.finish(ctx.out_dir);
}

void stage_match(const TomlDocument& doc, const StageContext& ctx) {
    validate_keys(doc, {"match.cohort_dir", "match.transforms_path", "match.gate_mm"}, {});
    std::string cohort_dir = require_string(doc, "match.cohort_dir");
    std::string transforms_path = require_string(doc, "match.transforms_path");
    double gate = get_float(doc, "match.gate_mm", correspondence::kDefaultGateMm);

    ManifestBuilder manifest("match", doc, ctx);
    manifest.input("transforms", transforms_path);
    cohort::Cohort cohort = cohort::load_cohort(cohort_dir);
    TransformArchive archive = read_transform_archive(transforms_path);
    auto tracks = correspondence::build_tracks(cohort, to_transform_map(archive), gate);
    write_text((fs::path(ctx.out_dir) / "tracks.csv").string(),
               correspondence::tracks_to_csv(tracks));
    manifest.finish(ctx.out_dir);
}

void stage_features(const TomlDocument& doc, const StageContext& ctx) {
    validate_keys(doc,
                  {"features.cohort_dir", "features.tracks_path", "features.bin_width_hu",
                   "features.glcm_distance_px"},
                  {});
    std::string cohort_dir = require_string(doc, "features.cohort_dir");
    std::string tracks_path = require_string(doc, "features.tracks_path");
    radiomics::GlcmConfig gcfg;
    gcfg.bin_width_hu = get_float(doc, "features.bin_width_hu", radiomics::kDefaultBinWidthHu);
    gcfg.distance_px = static_cast<int>(get_int(doc, "features.glcm_distance_px", 1));

    ManifestBuilder manifest("features", doc, ctx);
    manifest.input("tracks", tracks_path);
    cohort::Cohort cohort = cohort::load_cohort(cohort_dir);
    auto tracks = tracks_from_csv(tracks_path);
    cohort::FeatureTable table = radiomics::compute_feature_table(cohort, tracks, gcfg);
    write_text((fs::path(ctx.out_dir) / "features.csv").string(),
               radiomics::feature_table_to_csv(table, radiomics::family_index(table)));
    manifest.finish(ctx.out_dir);
}

void stage_delta(const TomlDocument& doc, const StageContext& ctx) {
    validate_keys(doc, {"delta.cohort_dir", "delta.features_path", "delta.max_timepoint"}, {});
    std::string cohort_dir = require_string(doc, "delta.cohort_dir");
    std::string features_path = require_string(doc, "delta.features_path");
    cohort::Timepoint max_tp =
        cohort::Timepoint::from_label(get_string(doc, "delta.max_timepoint", "Week24"));

    ManifestBuilder manifest("delta", doc, ctx);
    manifest.input("features", features_path);
    cohort::Cohort cohort = cohort::load_cohort(cohort_dir);
    cohort::FeatureTable table = feature_table_from_csv(features_path);
    cohort::DesignSet designs = cohort::assemble_design(cohort, table, max_tp);
    write_design_csv(designs, (fs::path(ctx.out_dir) / "design.csv").string());
    write_longitudinal_csv(table, (fs::path(ctx.out_dir) / "longitudinal.csv").string());
    if (!designs.excluded_patients.empty()) {
        json warn;
        warn["excluded_patients_without_screening_features"] = designs.excluded_patients;
        write_text((fs::path(ctx.out_dir) / "delta_warnings.json").string(),
                   warn.dump(2) + "\n");
    }
    manifest.finish(ctx.out_dir);
}

struct TrainTestSplit {
    std::vector<std::size_t> train, test;
};

TrainTestSplit split_patients(std::size_t n, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ConfigError("train_fraction must be in (0, 1)");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = Rng::substream(seed, "train-test-split");
    rng.shuffle(idx);
    std::size_t n_train = std::max<std::size_t>(2, static_cast<std::size_t>(
                                                       std::floor(train_fraction * n)));
    n_train = std::min(n_train, n - 2);
    TrainTestSplit split;
    split.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

survival::SurvivalData take_rows(const survival::SurvivalData& data,
                                 const std::vector<std::size_t>& rows) {
    survival::SurvivalData out;
    out.x.resize(static_cast<Eigen::Index>(rows.size()), data.x.cols());
    out.time.resize(static_cast<Eigen::Index>(rows.size()));
    out.event.resize(static_cast<Eigen::Index>(rows.size()));
    out.column_names = data.column_names;
    out.blocks = data.blocks;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.x.row(static_cast<Eigen::Index>(i)) = data.x.row(static_cast<Eigen::Index>(rows[i]));
        out.time[static_cast<Eigen::Index>(i)] = data.time[static_cast<Eigen::Index>(rows[i])];
        out.event[static_cast<Eigen::Index>(i)] =
            data.event[static_cast<Eigen::Index>(rows[i])];
        out.patient_ids.push_back(data.patient_ids[rows[i]]);
    }
    return out;
}

std::vector<double> times_of(const survival::SurvivalData& d) {
    return std::vector<double>(d.time.data(), d.time.data() + d.time.size());
}
std::vector<int> events_of(const survival::SurvivalData& d) {
    return std::vector<int>(d.event.data(), d.event.data() + d.event.size());
}

json cindex_to_json(const survival::CIndexEstimate& e) {
    return json{{"point", e.point},     {"mean_boot", e.mean_boot}, {"se_boot", e.se_boot},
                {"ci_lo", e.ci_lo},     {"ci_hi", e.ci_hi},         {"resamples", e.resamples}};
}

void stage_fit_lasso(const TomlDocument& doc, const StageContext& ctx) {
    validate_keys(doc,
                  {"fit-lasso.design_path", "fit-lasso.max_timepoint", "fit-lasso.folds",
                   "fit-lasso.seed", "fit-lasso.n_lambda", "fit-lasso.lambda_min_ratio",
                   "fit-lasso.train_fraction", "fit-lasso.bootstrap_b",
                   "fit-lasso.penalty_free_demographics"},
                  {});
    std::string design_path = require_string(doc, "fit-lasso.design_path");
    cohort::Timepoint max_tp =
        cohort::Timepoint::from_label(get_string(doc, "fit-lasso.max_timepoint", "Week24"));
    int folds = static_cast<int>(get_int(doc, "fit-lasso.folds", 5));
    std::uint64_t seed = static_cast<std::uint64_t>(get_int(doc, "fit-lasso.seed", 0));
    survival::LassoConfig lcfg;
    lcfg.n_lambda = static_cast<int>(get_int(doc, "fit-lasso.n_lambda", 100));
    lcfg.lambda_min_ratio = get_float(doc, "fit-lasso.lambda_min_ratio", 0.01);
    double train_fraction = get_float(doc, "fit-lasso.train_fraction", 0.6);
    int bootstrap_b = static_cast<int>(get_int(doc, "fit-lasso.bootstrap_b", 1000));

    ManifestBuilder manifest("fit-lasso", doc, ctx);
    manifest.input("design", design_path);
    manifest.seed("fit-lasso", seed);

    cohort::DesignSet designs = read_design_csv(design_path);
    survival::MatrixBuildReport built = survival::build_matrix(designs, max_tp);
    if (get_bool(doc, "fit-lasso.penalty_free_demographics", false)) {
        const survival::BlockSpec* b = built.data.block("demographics");
        if (b)
            for (std::size_t j = 0; j < b->width; ++j) lcfg.penalty_free.push_back(b->offset + j);
    }

    TrainTestSplit split = split_patients(built.data.n(), train_fraction, seed);
    survival::SurvivalData train = take_rows(built.data, split.train);
    survival::SurvivalData test = take_rows(built.data, split.test);

    survival::LassoPath path = survival::cv_cindex_path(train, folds, seed, lcfg);
    const auto& opt = path.points[path.opt_index];
    std::vector<double> risk = survival::risk_scores(test, opt.theta);
    survival::CIndexEstimate est = survival::bootstrap_cindex_ci(
        risk, times_of(test), events_of(test), bootstrap_b, seed);

    write_text((fs::path(ctx.out_dir) / "cvpath.csv").string(), survival::cvpath_to_csv(path));
    json model;
    model["lambda_opt"] = opt.lambda;
    model["lambda_max"] = path.lambda_max;
    model["nonzero"] = opt.nonzero;
    model["seed"] = seed;
    model["folds"] = folds;
    model["max_timepoint"] = max_tp.label();
    model["dropped_columns"] = built.dropped_columns;
    model["dropped_patients"] = built.dropped_patients;
    json coef = json::object();
    for (std::size_t j = 0; j < built.data.column_names.size(); ++j)
        if (opt.theta[static_cast<Eigen::Index>(j)] != 0.0)
            coef[built.data.column_names[j]] = opt.theta[static_cast<Eigen::Index>(j)];
    model["coefficients"] = coef;
    write_text((fs::path(ctx.out_dir) / "model.json").string(), model.dump(2) + "\n");
    write_text((fs::path(ctx.out_dir) / "cindex.json").string(),
               cindex_to_json(est).dump(2) + "\n");
    report::write_figure(report::render_cvpath(path),
                         (fs::path(ctx.out_dir) / "cvpath.svg").string());
    manifest.finish(ctx.out_dir);
}

void stage_bess(const TomlDocument& doc, const StageContext& ctx) {
    validate_keys(doc,
                  {"bess.design_path", "bess.max_timepoint", "bess.per_block", "bess.seed",
                   "bess.train_fraction", "bess.bootstrap_b"},
                  {});
    std::string design_path = require_string(doc, "bess.design_path");
    cohort::Timepoint max_tp =
        cohort::Timepoint::from_label(get_string(doc, "bess.max_timepoint", "Week24"));
    std::size_t per_block = static_cast<std::size_t>(get_int(doc, "bess.per_block", 4));
    std::uint64_t seed = static_cast<std::uint64_t>(get_int(doc, "bess.seed", 0));
    double train_fraction = get_float(doc, "bess.train_fraction", 0.6);
    int bootstrap_b = static_cast<int>(get_int(doc, "bess.bootstrap_b", 1000));

    ManifestBuilder manifest("bess", doc, ctx);
    manifest.input("design", design_path);
    manifest.seed("bess", seed);

    cohort::DesignSet designs = read_design_csv(design_path);
    survival::MatrixBuildReport built = survival::build_matrix(designs, max_tp);
    TrainTestSplit split = split_patients(built.data.n(), train_fraction, seed);
    survival::SurvivalData train = take_rows(built.data, split.train);
    survival::SurvivalData test = take_rows(built.data, split.test);

    subset::SequentialSelection sel = subset::select_top4_sequential(train, per_block);

    json out;
    out["per_block"] = per_block;
    out["warnings"] = sel.warnings;
    json blocks = json::array();
    std::vector<std::size_t> cumulative;
    const survival::BlockSpec* dem = train.block("demographics");
    if (dem)
        for (std::size_t j = 0; j < dem->width; ++j) cumulative.push_back(dem->offset + j);
    std::vector<survival::CIndexEstimate> stage_estimates;
    std::vector<std::string> stage_labels;
    for (std::size_t bi = 0; bi < sel.block_names.size(); ++bi) {
        for (std::size_t c : sel.selected_per_block[bi]) cumulative.push_back(c);
        // refit on the cumulative set, evaluate on the test split
        std::vector<std::size_t> cols = cumulative;
        std::sort(cols.begin(), cols.end());
        survival::SurvivalData train_sub;
        train_sub.time = train.time;
        train_sub.event = train.event;
        train_sub.x.resize(train.x.rows(), static_cast<Eigen::Index>(cols.size()));
        survival::SurvivalData test_sub;
        test_sub.time = test.time;
        test_sub.event = test.event;
        test_sub.x.resize(test.x.rows(), static_cast<Eigen::Index>(cols.size()));
        for (std::size_t c = 0; c < cols.size(); ++c) {
            train_sub.x.col(static_cast<Eigen::Index>(c)) =
                train.x.col(static_cast<Eigen::Index>(cols[c]));
            test_sub.x.col(static_cast<Eigen::Index>(c)) =
                test.x.col(static_cast<Eigen::Index>(cols[c]));
            train_sub.column_names.push_back(train.column_names[cols[c]]);
            test_sub.column_names.push_back(train.column_names[cols[c]]);
        }
        survival::CoxFit fit = survival::fit_cox(train_sub);
        std::vector<double> risk = survival::risk_scores(test_sub, fit.theta);
        survival::CIndexEstimate est = survival::bootstrap_cindex_ci(
            risk, times_of(test), events_of(test), bootstrap_b, seed);
        json jb;
        jb["block"] = sel.block_names[bi];
        json selected = json::array();
        for (std::size_t c : sel.selected_per_block[bi])
            selected.push_back(train.column_names[c]);
        jb["selected"] = selected;
        jb["total_features"] = cols.size();
        json coefs = json::object();
        for (std::size_t c = 0; c < cols.size(); ++c)
            coefs[train_sub.column_names[c]] = fit.theta[static_cast<Eigen::Index>(c)];
        jb["coefficients"] = coefs;
        jb["test_cindex"] = cindex_to_json(est);
        blocks.push_back(jb);
        stage_estimates.push_back(est);
        stage_labels.push_back(sel.block_names[bi]);
    }
    out["stages"] = blocks;
    write_text((fs::path(ctx.out_dir) / "bess.json").string(), out.dump(2) + "\n");
    report::write_figure(report::render_cindex_bars(stage_estimates, stage_labels),
                         (fs::path(ctx.out_dir) / "bess_cindex.svg").string());
    manifest.finish(ctx.out_dir);
}

void stage_importance(const TomlDocument& doc, const StageContext& ctx) {
    validate_keys(doc,
                  {"importance.design_path", "importance.size_min", "importance.size_max",
                   "importance.train_fraction", "importance.seed"},
                  {});
    std::string design_path = require_string(doc, "importance.design_path");
    int size_min = static_cast<int>(get_int(doc, "importance.size_min", 2));
    int size_max = static_cast<int>(get_int(doc, "importance.size_max", 20));
    double train_fraction = get_float(doc, "importance.train_fraction", 0.6);
    std::uint64_t seed = static_cast<std::uint64_t>(get_int(doc, "importance.seed", 0));

    ManifestBuilder manifest("importance", doc, ctx);
    manifest.input("design", design_path);
    manifest.seed("importance", seed);

    cohort::DesignSet designs = read_design_csv(design_path);
    survival::MatrixBuildReport built =
        survival::build_matrix(designs, cohort::Timepoint::from_index(3));
    // voting uses the training split only
    TrainTestSplit split = split_patients(built.data.n(), train_fraction, seed);
    survival::SurvivalData train = take_rows(built.data, split.train);
    subset::ImportanceTable table = subset::vote_importance(train, size_min, size_max);
    write_text((fs::path(ctx.out_dir) / "importance.csv").string(),
               subset::importance_to_csv(table));
    report::write_figure(report::render_importance_bars(table),
                         (fs::path(ctx.out_dir) / "importance.svg").string());
    manifest.finish(ctx.out_dir);
}

void stage_jointmodel(const TomlDocument& doc, const StageContext& ctx) {
    validate_keys(doc,
                  {"jointmodel.cohort_dir", "jointmodel.features_path", "jointmodel.model",
                   "jointmodel.iterations", "jointmodel.burn_in", "jointmodel.thin",
                   "jointmodel.seed", "jointmodel.standardize_survival"},
                  {});
    std::string cohort_dir = require_string(doc, "jointmodel.cohort_dir");
    std::string features_path = require_string(doc, "jointmodel.features_path");
    std::string model = get_string(doc, "jointmodel.model", "model1");

    jointmodel::McmcConfig mcfg;
    mcfg.iterations = static_cast<int>(get_int(doc, "jointmodel.iterations", 20000));
    mcfg.burn_in = static_cast<int>(get_int(doc, "jointmodel.burn_in", 1000));
    mcfg.thin = static_cast<int>(get_int(doc, "jointmodel.thin", 10));
    mcfg.seed = static_cast<std::uint64_t>(get_int(doc, "jointmodel.seed", 0));
    mcfg.standardize_survival_covariates =
        get_bool(doc, "jointmodel.standardize_survival", false);

    const std::vector<jointmodel::FeatureSpec>* features;
    if (model == "model1")
        features = &jointmodel::model1_features();
    else if (model == "model2")
        features = &jointmodel::model2_features();
    else if (model == "model3")
        features = &jointmodel::model3_features();
    else
        throw ConfigError("jointmodel.model must be one of model1, model2, model3");

    ManifestBuilder manifest("jointmodel", doc, ctx);
    manifest.input("features", features_path);
    manifest.seed("jointmodel", mcfg.seed);

    cohort::Cohort cohort = cohort::load_cohort(cohort_dir);
    cohort::FeatureTable table = feature_table_from_csv(features_path);
    jointmodel::JointModelData data = jointmodel::build_joint_data(cohort, table, *features);
    jointmodel::JointModelFit fit = jointmodel::fit_joint_mcmc(data, mcfg);

    jointmodel::save_fit(fit, (fs::path(ctx.out_dir) / "fit").string());
    write_text((fs::path(ctx.out_dir) / "summary.csv").string(),
               jointmodel::summary_to_csv(jointmodel::summarize_fit(fit)));
    jointmodel::FitMetrics metrics = jointmodel::fit_metrics(fit);
    json jm;
    jm["dic"] = metrics.dic;
    jm["p_d"] = metrics.p_d;
    jm["waic"] = metrics.waic;
    jm["p_waic"] = metrics.p_waic;
    jm["lpml"] = metrics.lpml;
    write_text((fs::path(ctx.out_dir) / "metrics.json").string(), jm.dump(2) + "\n");
    auto diags = jointmodel::trace_diagnostics(fit);
    CsvTable dt(std::vector<std::string>{"parameter", "split_rhat", "ess", "degenerate"});
    for (const auto& d : diags)
        dt.add_row({d.name, d.degenerate ? "" : num17(d.split_rhat),
                    d.degenerate ? "" : num17(d.ess), d.degenerate ? "1" : "0"});
    write_text((fs::path(ctx.out_dir) / "diagnostics.csv").string(), dt.to_string());
    fs::create_directories(fs::path(ctx.out_dir) / "figures");
    for (const auto& series : report::trace_series_of(fit)) {
        std::string safe;
        for (char c : series.parameter)
            safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-') ? c
                                                                                          : '_';
        report::write_figure(report::render_trace(series),
                             (fs::path(ctx.out_dir) / "figures" / ("trace_" + safe + ".svg"))
                                 .string());
    }
    manifest.finish(ctx.out_dir);
}

void stage_report(const TomlDocument& doc, const StageContext& ctx) {
    validate_keys(doc,
                  {"report.cvpath_csv", "report.importance_csv", "report.longitudinal_csv",
                   "report.cohort_dir", "report.boxplot_feature", "report.boxplot_log",
                   "report.cindex_json", "report.cindex_labels"},
                  {});
    ManifestBuilder manifest("report", doc, ctx);
    bool produced = false;

    if (doc.contains("report.cvpath_csv")) {
        std::string path = require_string(doc, "report.cvpath_csv");
        manifest.input("cvpath", path);
        CsvTable t = CsvTable::read_file(path);
        survival::LassoPath lp;
        double best = -1e300;
        for (std::size_t r = 0; r < t.row_count(); ++r) {
            survival::LassoPathPoint pt;
            pt.lambda = t.cell_double(r, "lambda");
            pt.cv_mean_c = t.cell_double(r, "mean_c");
            pt.cv_se_c = t.cell_double(r, "se_c");
            pt.nonzero = static_cast<int>(t.cell_long(r, "nnz"));
            if (std::isfinite(pt.cv_mean_c) && pt.cv_mean_c > best) {
                best = pt.cv_mean_c;
                lp.opt_index = r;
            }
            lp.points.push_back(pt);
        }
        report::write_figure(report::render_cvpath(lp),
                             (fs::path(ctx.out_dir) / "cvpath.svg").string());
        produced = true;
    }

    if (doc.contains("report.cindex_json")) {
        const auto& arr = doc.at("report.cindex_json").as_array();
        std::vector<survival::CIndexEstimate> ests;
        std::vector<std::string> labels;
        for (std::size_t i = 0; i < arr.size(); ++i) {
            std::string path = arr[i].as_string();
            manifest.input("cindex_" + std::to_string(i), path);
            json j = json::parse(read_text(path));
            survival::CIndexEstimate e;
            e.point = j.at("point").get<double>();
            e.mean_boot = j.at("mean_boot").get<double>();
            e.se_boot = j.at("se_boot").get<double>();
            e.ci_lo = j.at("ci_lo").get<double>();
            e.ci_hi = j.at("ci_hi").get<double>();
            e.resamples = j.at("resamples").get<int>();
            ests.push_back(e);
            labels.push_back("M" + std::to_string(i + 1));
        }
        if (doc.contains("report.cindex_labels")) {
            const auto& la = doc.at("report.cindex_labels").as_array();
            if (la.size() != ests.size())
                throw ConfigError("report.cindex_labels length mismatch");
            for (std::size_t i = 0; i < la.size(); ++i) labels[i] = la[i].as_string();
        }
        report::write_figure(report::render_cindex_bars(ests, labels),
                             (fs::path(ctx.out_dir) / "cindex.svg").string());
        produced = true;
    }

    if (doc.contains("report.importance_csv")) {
        std::string path = require_string(doc, "report.importance_csv");
        manifest.input("importance", path);
        CsvTable t = CsvTable::read_file(path);
        std::map<std::string, subset::ImportanceRow> rows;
        for (std::size_t r = 0; r < t.row_count(); ++r) {
            auto& row = rows.try_emplace(t.cell(r, "feature")).first->second;
            row.feature = t.cell(r, "feature");
            int tp = cohort::Timepoint::from_label(t.cell(r, "timepoint")).index();
            row.per_timepoint[static_cast<std::size_t>(tp)] =
                static_cast<int>(t.cell_long(r, "score"));
            row.total = static_cast<int>(t.cell_long(r, "total"));
        }
        subset::ImportanceTable table;
        for (auto& [name, row] : rows) table.rows.push_back(row);
        std::sort(table.rows.begin(), table.rows.end(),
                  [](const subset::ImportanceRow& a, const subset::ImportanceRow& b) {
                      if (a.total != b.total) return a.total > b.total;
                      return a.feature < b.feature;
                  });
        report::write_figure(report::render_importance_bars(table),
                             (fs::path(ctx.out_dir) / "importance.svg").string());
        produced = true;
    }

    if (doc.contains("report.longitudinal_csv")) {
        std::string path = require_string(doc, "report.longitudinal_csv");
        std::string cohort_dir = require_string(doc, "report.cohort_dir");
        std::string feature = require_string(doc, "report.boxplot_feature");
        bool logscale = get_bool(doc, "report.boxplot_log", true);
        manifest.input("longitudinal", path);
        cohort::Cohort cohort = cohort::load_cohort(cohort_dir);
        CsvTable t = CsvTable::read_file(path);
        std::map<std::pair<int, int>, std::vector<double>> cells;  // (arm, tp)
        for (std::size_t r = 0; r < t.row_count(); ++r) {
            if (t.cell(r, "feature_name") != feature) continue;
            if (t.cell(r, "value").empty()) continue;
            const auto& patient = cohort.patient(t.cell(r, "patient_id"));
            int arm = patient.demographics.arm() > 0.5 ? 1 : 0;
            int tp = cohort::Timepoint::from_label(t.cell(r, "timepoint")).index();
            cells[{arm, tp}].push_back(t.cell_double(r, "value"));
        }
        report::BoxPlotInput input;
        input.feature_name = feature;
        for (const auto& [key, values] : cells)
            input.cells.push_back({key.first, key.second, values});
        report::FigureSpec spec;
        spec.kind = report::FigureKind::BoxByArm;
        spec.log_scale = logscale;
        std::string safe;
        for (char c : feature)
            safe += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
        report::write_figure(report::render_box_by_arm(input, spec),
                             (fs::path(ctx.out_dir) / ("box_" + safe + ".svg")).string());
        produced = true;
    }

    if (!produced)
        throw ConfigError("report: no inputs given (expected at least one report.* key)");
    manifest.finish(ctx.out_dir);
}

}  // namespace

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> kNames = {"simulate", "register", "match",
                                                    "features", "delta",    "fit-lasso",
                                                    "bess",     "importance", "jointmodel",
                                                    "report"};
    return kNames;
}

void run_stage(const std::string& command, const StageContext& ctx) {
    TomlDocument doc = TomlDocument::parse_file(ctx.config_path);
    fs::create_directories(ctx.out_dir);
    if (command == "simulate") stage_simulate(doc, ctx);
    else if (command == "register") stage_register(doc, ctx);
    else if (command == "match") stage_match(doc, ctx);
    else if (command == "features") stage_features(doc, ctx);
    else if (command == "delta") stage_delta(doc, ctx);
    else if (command == "fit-lasso") stage_fit_lasso(doc, ctx);
    else if (command == "bess") stage_bess(doc, ctx);
    else if (command == "importance") stage_importance(doc, ctx);
    else if (command == "jointmodel") stage_jointmodel(doc, ctx);
    else if (command == "report") stage_report(doc, ctx);
    else throw ConfigError("unknown command '" + command + "'");
}

// ---------------------------------------------------------------------------
// artifact round-trips

void write_design_csv(const cohort::DesignSet& designs, const std::string& path) {
    std::vector<std::string> cols{"patient_id", "time_days", "event"};
    for (const auto& d : cohort::Demographics::names()) cols.push_back(d);
    static const std::array<std::string, 4> kPrefix = {"x", "w8", "w16", "w24"};
    for (const auto& prefix : kPrefix)
        for (const auto& f : designs.feature_names) cols.push_back(prefix + ":" + f);
    CsvTable t(cols);
    const std::size_t nf = designs.feature_names.size();
    for (const auto& d : designs.patients) {
        std::vector<std::string> row{d.patient_id, num17(d.outcome.time_days),
                                     std::to_string(d.outcome.event)};
        for (double v : d.demographics.values) row.push_back(num17(v));
        for (std::size_t f = 0; f < nf; ++f)
            row.push_back(d.x_degenerate[f] ? kNA : num17(d.x[f]));
        for (int tp = 1; tp <= 3; ++tp) {
            std::size_t bi = static_cast<std::size_t>(tp - 1);
            for (std::size_t f = 0; f < nf; ++f) {
                if (!d.has_delta[bi] || d.delta_degenerate[bi][f])
                    row.push_back(kNA);
                else
                    row.push_back(num17(d.delta[bi][f]));
            }
        }
        t.add_row(std::move(row));
    }
    t.write_file(path);
}

cohort::DesignSet read_design_csv(const std::string& path) {
    CsvTable t = CsvTable::read_file(path);
    cohort::DesignSet designs;
    designs.max_timepoint = cohort::Timepoint::from_index(3);
    static const std::array<std::string, 4> kPrefix = {"x", "w8", "w16", "w24"};
    for (const auto& col : t.columns()) {
        if (col.rfind("x:", 0) == 0) designs.feature_names.push_back(col.substr(2));
    }
    const std::size_t nf = designs.feature_names.size();
    if (nf == 0) throw LoadError("design.csv has no baseline feature columns: " + path);

    for (std::size_t r = 0; r < t.row_count(); ++r) {
        cohort::PatientDesign d;
        d.patient_id = t.cell(r, "patient_id");
        d.outcome.time_days = t.cell_double(r, "time_days");
        d.outcome.event = static_cast<int>(t.cell_long(r, "event"));
        for (int i = 0; i < cohort::Demographics::kCount; ++i)
            d.demographics.values[static_cast<std::size_t>(i)] =
                t.cell_double(r, cohort::Demographics::names()[static_cast<std::size_t>(i)]);
        d.arm = d.demographics.arm();
        d.x.assign(nf, 0.0);
        d.x_degenerate.assign(nf, 0);
        for (std::size_t f = 0; f < nf; ++f) {
            const std::string& cell = t.cell(r, "x:" + designs.feature_names[f]);
            if (cell == kNA) {
                d.x_degenerate[f] = 1;
                d.x[f] = std::numeric_limits<double>::quiet_NaN();
            } else {
                d.x[f] = parse_double(cell, "design cell");
            }
        }
        for (int tp = 1; tp <= 3; ++tp) {
            std::size_t bi = static_cast<std::size_t>(tp - 1);
            std::vector<double> vals(nf, 0.0);
            std::vector<std::uint8_t> degen(nf, 0);
            bool all_na = true;
            for (std::size_t f = 0; f < nf; ++f) {
                const std::string& cell =
                    t.cell(r, kPrefix[static_cast<std::size_t>(tp)] + ":" +
                                  designs.feature_names[f]);
                if (cell == kNA) {
                    degen[f] = 1;
                    vals[f] = std::numeric_limits<double>::quiet_NaN();
                } else {
                    vals[f] = parse_double(cell, "design cell");
                    all_na = false;
                }
            }
            if (!all_na) {
                d.has_delta[bi] = true;
                d.delta[bi] = std::move(vals);
                d.delta_degenerate[bi] = std::move(degen);
            }
        }
        designs.patients.push_back(std::move(d));
    }
    return designs;
}

void write_longitudinal_csv(const cohort::FeatureTable& table, const std::string& path) {
    // mean across tracks per (patient, timepoint, feature)
    struct A {
        double sum = 0.0;
        std::size_t n = 0;
    };
    std::map<std::tuple<std::string, int, std::string>, A> acc;
    for (const auto& row : table.rows)
        for (std::size_t f = 0; f < table.feature_names.size(); ++f) {
            if (row.degenerate[f]) continue;
            auto& a = acc[{row.patient_id, row.timepoint.index(), table.feature_names[f]}];
            a.sum += row.values[f];
            a.n += 1;
        }
    CsvTable t(std::vector<std::string>{"patient_id", "timepoint", "feature_name", "value"});
    for (const auto& [key, a] : acc)
        t.add_row({std::get<0>(key), cohort::Timepoint::from_index(std::get<1>(key)).label(),
                   std::get<2>(key), num17(a.sum / static_cast<double>(a.n))});
    t.write_file(path);
}

cohort::FeatureTable feature_table_from_csv(const std::string& path) {
    CsvTable t = CsvTable::read_file(path);
    std::set<std::string> names;
    for (std::size_t r = 0; r < t.row_count(); ++r) names.insert(t.cell(r, "feature_name"));
    // canonical order: internal features first, then externals sorted
    cohort::FeatureTable table;
    for (const auto& n : radiomics::internal_feature_names())
        if (names.count(n)) table.feature_names.push_back(n);
    for (const auto& n : names)
        if (std::find(table.feature_names.begin(), table.feature_names.end(), n) ==
            table.feature_names.end())
            table.feature_names.push_back(n);
    std::map<std::string, std::size_t> col_of;
    for (std::size_t i = 0; i < table.feature_names.size(); ++i)
        col_of[table.feature_names[i]] = i;

    std::map<std::tuple<std::string, int, std::string>, cohort::FeatureTableRow> rows;
    for (std::size_t r = 0; r < t.row_count(); ++r) {
        std::string pid = t.cell(r, "patient_id");
        int tp = cohort::Timepoint::from_label(t.cell(r, "timepoint")).index();
        std::string track = t.cell(r, "track_id");
        auto& row = rows.try_emplace({pid, tp, track}).first->second;
        if (row.values.empty()) {
            row.patient_id = pid;
            row.timepoint = cohort::Timepoint::from_index(tp);
            row.track_id = track;
            row.values.assign(table.feature_names.size(),
                              std::numeric_limits<double>::quiet_NaN());
            row.degenerate.assign(table.feature_names.size(), 1);
        }
        std::size_t col = col_of.at(t.cell(r, "feature_name"));
        bool degen = t.cell(r, "degenerate_flag") == "1";
        row.degenerate[col] = degen ? 1 : 0;
        row.values[col] = degen ? std::numeric_limits<double>::quiet_NaN()
                                : t.cell_double(r, "value");
    }
    for (auto& [key, row] : rows) table.rows.push_back(std::move(row));
    return table;
}

std::vector<correspondence::LesionTrack> tracks_from_csv(const std::string& path) {
    CsvTable t = CsvTable::read_file(path);
    std::map<std::pair<std::string, std::string>, correspondence::LesionTrack> tracks;
    for (std::size_t r = 0; r < t.row_count(); ++r) {
        std::string pid = t.cell(r, "patient_id");
        std::string tid = t.cell(r, "track_id");
        auto& track = tracks.try_emplace({pid, tid}).first->second;
        track.patient_id = pid;
        track.track_id = tid;
        int tp = cohort::Timepoint::from_label(t.cell(r, "timepoint")).index();
        std::string status = t.cell(r, "status");
        if (status == "present") track.status[tp] = correspondence::TrackStatus::Present;
        else if (status == "new") track.status[tp] = correspondence::TrackStatus::New;
        else if (status == "disappeared")
            track.status[tp] = correspondence::TrackStatus::Disappeared;
        else throw LoadError("tracks.csv: unknown status '" + status + "'");
        if (t.cell(r, "source_group").empty()) continue;  // disappeared marker row
        correspondence::TrackMember mb;
        mb.group = cohort::source_group_from_string(t.cell(r, "source_group"));
        mb.lesion_label = t.cell(r, "lesion_label");
        const std::string& dist = t.cell(r, "matched_distance_mm");
        if (!dist.empty()) {
            mb.matched_distance_mm = parse_double(dist, "matched_distance_mm");
            mb.has_matched_distance = true;
        }
        track.members[tp].push_back(mb);
    }
    std::vector<correspondence::LesionTrack> out;
    for (auto& [key, track] : tracks) out.push_back(std::move(track));
    return out;
}

void write_transform_archive(const TransformArchive& archive, const std::string& path) {
    json j;
    json patients = json::object();
    for (const auto& [pid, reference] : archive.reference_series) {
        json p;
        p["reference"] = reference;
        json ts = json::object();
        auto it = archive.transforms.find(pid);
        if (it != archive.transforms.end()) {
            for (const auto& [moving, t] : it->second) {
                std::vector<double> rot(9);
                for (int r = 0; r < 3; ++r)
                    for (int c = 0; c < 3; ++c) rot[r * 3 + c] = t.rotation(r, c);
                ts[moving] = {{"rotation", rot},
                              {"translation",
                               {t.translation[0], t.translation[1], t.translation[2]}}};
            }
        }
        p["transforms"] = ts;
        patients[pid] = p;
    }
    j["patients"] = patients;
    write_text(path, j.dump(2) + "\n");
}

TransformArchive read_transform_archive(const std::string& path) {
    json j = json::parse(read_text(path));
    TransformArchive archive;
    for (const auto& [pid, p] : j.at("patients").items()) {
        archive.reference_series[pid] = p.at("reference").get<std::string>();
        for (const auto& [moving, tj] : p.at("transforms").items()) {
            registration::RigidTransform t;
            auto rot = tj.at("rotation");
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) t.rotation(r, c) = rot.at(r * 3 + c).get<double>();
            auto tr = tj.at("translation");
            for (int d = 0; d < 3; ++d) t.translation[d] = tr.at(d).get<double>();
            t.validate();
            archive.transforms[pid][moving] = t;
        }
    }
    return archive;
}

correspondence::TransformMap to_transform_map(const TransformArchive& archive) {
    correspondence::TransformMap map;
    for (const auto& [pid, per_series] : archive.transforms) {
        const std::string& reference = archive.reference_series.at(pid);
        for (const auto& [moving, t] : per_series) map[{moving, reference}] = t;
    }
    return map;
}

std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot hash missing file: " + path);
    std::uint64_t h = 1469598103934665603ULL;
    char buf[65536];
    while (in) {
        in.read(buf, sizeof(buf));
        std::streamsize got = in.gcount();
        for (std::streamsize i = 0; i < got; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ULL;
        }
    }
    return h;
}

}  // namespace longrad::pipeline
