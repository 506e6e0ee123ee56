#include "longrad/cohort.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <tuple>

#include "longrad/csv.hpp"
#include "nlohmann/json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace longrad::cohort {

namespace {

const std::array<std::string, 4> kTimepointLabels = {"Screening", "Week8", "Week16", "Week24"};

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("missing file: " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write file: " + path);
    out << content;
    if (!out) throw Error("I/O error writing file: " + path);
}

}  // namespace

Timepoint Timepoint::from_index(int index) {
    if (index < 0 || index >= kCount)
        throw ValidationError("timepoint index out of range: " + std::to_string(index));
    return Timepoint(index);
}

Timepoint Timepoint::from_label(const std::string& label) {
    for (int i = 0; i < kCount; ++i)
        if (kTimepointLabels[i] == label) return Timepoint(i);
    throw ValidationError("unknown timepoint label '" + label + "'");
}

const std::string& Timepoint::label() const { return kTimepointLabels[index_]; }

std::string to_string(SourceGroup g) { return g == SourceGroup::G1 ? "G1" : "G2"; }

SourceGroup source_group_from_string(const std::string& s) {
    if (s == "G1") return SourceGroup::G1;
    if (s == "G2") return SourceGroup::G2;
    throw ValidationError("unknown source group '" + s + "'");
}

bool ImageVolume::contains_physical(const Eigen::Vector3d& phys) const {
    Eigen::Vector3d ci = continuous_index(phys);
    for (int a = 0; a < 3; ++a)
        if (ci[a] < -0.5 || ci[a] > dims[a] - 0.5) return false;
    return true;
}

std::optional<double> ImageVolume::sample(const Eigen::Vector3d& phys) const {
    Eigen::Vector3d ci = continuous_index(phys);
    for (int a = 0; a < 3; ++a)
        if (ci[a] < 0.0 || ci[a] > dims[a] - 1.0) return std::nullopt;
    int i0 = std::min(static_cast<int>(ci[0]), dims[0] - 2);
    int j0 = std::min(static_cast<int>(ci[1]), dims[1] - 2);
    int k0 = std::min(static_cast<int>(ci[2]), dims[2] - 2);
    i0 = std::max(i0, 0);
    j0 = std::max(j0, 0);
    k0 = std::max(k0, 0);
    double fx = ci[0] - i0, fy = ci[1] - j0, fz = ci[2] - k0;
    auto v = [&](int di, int dj, int dk) {
        return static_cast<double>(at(std::min(i0 + di, dims[0] - 1),
                                      std::min(j0 + dj, dims[1] - 1),
                                      std::min(k0 + dk, dims[2] - 1)));
    };
    double c00 = v(0, 0, 0) * (1 - fx) + v(1, 0, 0) * fx;
    double c10 = v(0, 1, 0) * (1 - fx) + v(1, 1, 0) * fx;
    double c01 = v(0, 0, 1) * (1 - fx) + v(1, 0, 1) * fx;
    double c11 = v(0, 1, 1) * (1 - fx) + v(1, 1, 1) * fx;
    double c0 = c00 * (1 - fy) + c10 * fy;
    double c1 = c01 * (1 - fy) + c11 * fy;
    return c0 * (1 - fz) + c1 * fz;
}

void ImageVolume::validate(const std::string& what) const {
    for (int a = 0; a < 3; ++a)
        if (dims[a] <= 0) throw ValidationError(what + ": non-positive dimension");
    for (int a = 0; a < 3; ++a)
        if (!(spacing[a] > 0.0)) throw ValidationError(what + ": non-positive spacing");
    if (voxels.size() != voxel_count())
        throw ValidationError(what + ": voxel count " + std::to_string(voxels.size()) +
                              " does not match dims product " + std::to_string(voxel_count()));
    Eigen::Matrix3d gram = direction.transpose() * direction;
    if ((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-6)
        throw ValidationError(what + ": direction matrix not orthonormal within 1e-6");
}

bool ImageVolume::operator==(const ImageVolume& o) const {
    return dims == o.dims && spacing == o.spacing && origin == o.origin &&
           direction == o.direction && voxels == o.voxels;
}

std::size_t MaskRaster::pixel_count() const {
    std::size_t n = 0;
    for (auto v : data) n += (v != 0);
    return n;
}

bool MaskRaster::operator==(const MaskRaster& o) const {
    return width == o.width && height == o.height && data == o.data && spacing == o.spacing &&
           origin == o.origin;
}

bool LesionAnnotation::operator==(const LesionAnnotation& o) const {
    return patient_id == o.patient_id && timepoint == o.timepoint &&
           source_group == o.source_group && series_id == o.series_id &&
           lesion_label == o.lesion_label && centroid == o.centroid &&
           slice_index == o.slice_index && mask == o.mask && mask_id == o.mask_id;
}

const std::array<std::string, Demographics::kCount>& Demographics::names() {
    static const std::array<std::string, kCount> kNames = {
        "LIVERBL", "PRENGR1", "ENDSNBL", "AST", "ALP", "Age", "Denovo", "HGB", "ARM"};
    return kNames;
}

void Demographics::validate(const std::string& patient_id) const {
    // binary covariates: LIVERBL, PRENGR1, ENDSNBL, Denovo, ARM
    for (int idx : {0, 1, 2, 6, 8}) {
        double v = values[idx];
        if (v != 0.0 && v != 1.0)
            throw ValidationError("patient " + patient_id + ": " + names()[idx] +
                                  " must be 0 or 1, got " + num17(v));
    }
}

bool ExternalFeatureRow::operator==(const ExternalFeatureRow& o) const {
    return patient_id == o.patient_id && timepoint == o.timepoint &&
           lesion_label == o.lesion_label && feature_name == o.feature_name && value == o.value;
}

const Patient& Cohort::patient(const std::string& id) const {
    for (const auto& p : patients)
        if (p.id == id) return p;
    throw ValidationError("unknown patient '" + id + "'");
}

bool Cohort::has_patient(const std::string& id) const {
    for (const auto& p : patients)
        if (p.id == id) return true;
    return false;
}

std::vector<const LesionAnnotation*> Cohort::annotations_for(const std::string& patient_id) const {
    std::vector<const LesionAnnotation*> out;
    for (const auto& a : annotations)
        if (a.patient_id == patient_id) out.push_back(&a);
    return out;
}

bool Cohort::operator==(const Cohort& o) const {
    return patients == o.patients && volumes == o.volumes && annotations == o.annotations &&
           external_features == o.external_features;
}

MaskRaster read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("missing file: " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw LoadError("mask " + path + " is not binary PGM (P5)");
    auto next_token = [&]() -> long {
        // skip whitespace and '#' comments
        for (;;) {
            int c = in.peek();
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
        long v;
        if (!(in >> v)) throw LoadError("malformed PGM header: " + path);
        return v;
    };
    long w = next_token(), h = next_token(), maxval = next_token();
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw LoadError("unsupported PGM header in " + path);
    in.get();  // single whitespace after maxval
    MaskRaster m;
    m.width = static_cast<int>(w);
    m.height = static_cast<int>(h);
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(w) * h);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw LoadError("truncated PGM payload: " + path);
    m.data.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) m.data[i] = raw[i] != 0 ? 1 : 0;
    return m;
}

void write_pgm(const MaskRaster& mask, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write file: " + path);
    out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
    std::vector<std::uint8_t> raw(mask.data.size());
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = mask.data[i] ? 255 : 0;
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw Error("I/O error writing file: " + path);
}

namespace {

json volume_meta_to_json(const ImageVolume& v) {
    json j;
    j["dims"] = {v.dims[0], v.dims[1], v.dims[2]};
    j["spacing"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
    j["origin"] = {v.origin[0], v.origin[1], v.origin[2]};
    std::vector<double> dir(9);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) dir[r * 3 + c] = v.direction(r, c);
    j["direction"] = dir;
    return j;
}

ImageVolume volume_from_files(const std::string& meta_path, const std::string& raw_path) {
    json j = json::parse(read_text_file(meta_path));
    ImageVolume v;
    for (int a = 0; a < 3; ++a) {
        v.dims[a] = j.at("dims").at(a).get<int>();
        v.spacing[a] = j.at("spacing").at(a).get<double>();
        v.origin[a] = j.at("origin").at(a).get<double>();
    }
    auto dir = j.at("direction");
    if (dir.size() != 9) throw LoadError("direction must have 9 entries: " + meta_path);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) v.direction(r, c) = dir.at(r * 3 + c).get<double>();
    std::ifstream raw(raw_path, std::ios::binary);
    if (!raw) throw LoadError("missing file: " + raw_path);
    v.voxels.resize(v.voxel_count());
    raw.read(reinterpret_cast<char*>(v.voxels.data()),
             static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
    if (raw.gcount() != static_cast<std::streamsize>(v.voxels.size() * sizeof(float)))
        throw LoadError("raw volume size mismatch: " + raw_path);
    v.validate(raw_path);
    return v;
}

}  // namespace

Cohort load_cohort(const std::string& dir_path) {
    fs::path dir(dir_path);
    if (!fs::is_directory(dir)) throw LoadError("cohort directory not found: " + dir_path);
    Cohort c;

    // volumes
    fs::path voldir = dir / "volumes";
    if (fs::is_directory(voldir)) {
        std::vector<std::string> series;
        for (const auto& e : fs::directory_iterator(voldir)) {
            std::string name = e.path().filename().string();
            if (name.size() > 4 && name.substr(name.size() - 4) == ".raw")
                series.push_back(name.substr(0, name.size() - 4));
        }
        std::sort(series.begin(), series.end());
        for (const auto& s : series) {
            c.volumes.emplace(s, volume_from_files((voldir / (s + ".meta.json")).string(),
                                                   (voldir / (s + ".raw")).string()));
        }
    }

    // demographics
    CsvTable demo = CsvTable::read_file((dir / "demographics.csv").string());
    std::map<std::string, Demographics> demo_map;
    for (std::size_t r = 0; r < demo.row_count(); ++r) {
        std::string pid = demo.cell(r, "patient_id");
        Demographics d;
        for (int i = 0; i < Demographics::kCount; ++i)
            d.values[i] = demo.cell_double(r, Demographics::names()[i]);
        d.validate(pid);
        if (!demo_map.emplace(pid, d).second)
            throw IntegrityError("duplicate patient '" + pid + "' in demographics.csv");
    }

    // survival
    CsvTable surv = CsvTable::read_file((dir / "survival.csv").string());
    std::map<std::string, SurvivalOutcome> surv_map;
    for (std::size_t r = 0; r < surv.row_count(); ++r) {
        std::string pid = surv.cell(r, "patient_id");
        SurvivalOutcome o;
        o.time_days = surv.cell_double(r, "time_days");
        o.event = static_cast<int>(surv.cell_long(r, "event"));
        if (!(o.time_days > 0.0))
            throw ValidationError("patient " + pid + ": survival time must be positive");
        if (o.event != 0 && o.event != 1)
            throw ValidationError("patient " + pid + ": event must be 0 or 1");
        if (!surv_map.emplace(pid, o).second)
            throw IntegrityError("duplicate patient '" + pid + "' in survival.csv");
    }

    std::vector<std::string> missing;
    for (const auto& [pid, d] : demo_map)
        if (!surv_map.count(pid)) missing.push_back(pid);
    for (const auto& [pid, o] : surv_map)
        if (!demo_map.count(pid)) missing.push_back(pid);
    if (!missing.empty()) {
        std::string list;
        for (const auto& p : missing) list += (list.empty() ? "" : ", ") + p;
        throw IntegrityError("patients present in only one of demographics.csv/survival.csv: " +
                             list);
    }
    for (const auto& [pid, d] : demo_map)
        c.patients.push_back(Patient{pid, d, surv_map.at(pid)});

    // annotations
    CsvTable ann = CsvTable::read_file((dir / "annotations.csv").string());
    std::vector<std::string> dangling;
    for (std::size_t r = 0; r < ann.row_count(); ++r) {
        LesionAnnotation a;
        a.patient_id = ann.cell(r, "patient_id");
        a.timepoint = Timepoint::from_label(ann.cell(r, "timepoint"));
        a.source_group = source_group_from_string(ann.cell(r, "source_group"));
        a.series_id = ann.cell(r, "series_id");
        a.lesion_label = ann.cell(r, "lesion_label");
        a.centroid = {ann.cell_double(r, "x_mm"), ann.cell_double(r, "y_mm"),
                      ann.cell_double(r, "z_mm")};
        a.slice_index = static_cast<int>(ann.cell_long(r, "slice_index"));
        std::string mask_rel = ann.cell(r, "mask_path");
        a.mask = read_pgm((dir / mask_rel).string());
        fs::path mp(mask_rel);
        a.mask_id = mp.stem().string();
        if (!demo_map.count(a.patient_id))
            throw IntegrityError("annotation references unknown patient '" + a.patient_id + "'");
        auto vit = c.volumes.find(a.series_id);
        if (vit == c.volumes.end()) {
            dangling.push_back(a.series_id);
            continue;
        }
        const ImageVolume& vol = vit->second;
        if (!vol.contains_physical(a.centroid))
            throw ValidationError("annotation " + a.patient_id + "/" + a.lesion_label + " at " +
                                  a.timepoint.label() + ": centroid outside volume " +
                                  a.series_id);
        if (a.slice_index < 0 || a.slice_index >= vol.dims[2])
            throw ValidationError("annotation " + a.patient_id + "/" + a.lesion_label +
                                  ": slice_index out of range");
        if (a.mask.width != vol.dims[0] || a.mask.height != vol.dims[1])
            throw ValidationError("mask " + a.mask_id + " does not match slice dims of series " +
                                  a.series_id);
        if (a.mask.pixel_count() == 0)
            throw ValidationError("mask " + a.mask_id + " is empty");
        a.mask.spacing = {vol.spacing[0], vol.spacing[1]};
        a.mask.origin = {vol.origin[0], vol.origin[1]};
        c.annotations.push_back(std::move(a));
    }
    if (!dangling.empty()) {
        std::sort(dangling.begin(), dangling.end());
        dangling.erase(std::unique(dangling.begin(), dangling.end()), dangling.end());
        std::string list;
        for (const auto& s : dangling) list += (list.empty() ? "" : ", ") + s;
        throw IntegrityError("annotations reference unknown series: " + list);
    }

    // optional external features
    fs::path ext = dir / "external_features.csv";
    if (fs::exists(ext)) {
        CsvTable t = CsvTable::read_file(ext.string());
        std::set<std::tuple<std::string, int, std::string, std::string>> seen;
        for (std::size_t r = 0; r < t.row_count(); ++r) {
            ExternalFeatureRow row;
            row.patient_id = t.cell(r, "patient_id");
            row.timepoint = Timepoint::from_label(t.cell(r, "timepoint"));
            row.lesion_label = t.cell(r, "lesion_label");
            row.feature_name = t.cell(r, "feature_name");
            row.value = t.cell_double(r, "value");
            auto key = std::make_tuple(row.patient_id, row.timepoint.index(), row.lesion_label,
                                       row.feature_name);
            if (!seen.insert(key).second)
                throw IntegrityError("duplicate external feature row for (" + row.patient_id +
                                     ", " + row.timepoint.label() + ", " + row.lesion_label +
                                     ", " + row.feature_name + ")");
            c.external_features.push_back(std::move(row));
        }
    }

    return c;
}

void save_cohort(const Cohort& cohort, const std::string& dir_path) {
    fs::path dir(dir_path);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir)) throw Error("cannot create cohort directory: " + dir_path);
    fs::create_directories(dir / "volumes");
    fs::create_directories(dir / "masks");

    for (const auto& [series, vol] : cohort.volumes) {
        write_text_file((dir / "volumes" / (series + ".meta.json")).string(),
                        volume_meta_to_json(vol).dump(2) + "\n");
        std::ofstream raw((dir / "volumes" / (series + ".raw")).string(), std::ios::binary);
        if (!raw) throw Error("cannot write raw volume for series " + series);
        raw.write(reinterpret_cast<const char*>(vol.voxels.data()),
                  static_cast<std::streamsize>(vol.voxels.size() * sizeof(float)));
        if (!raw) throw Error("I/O error writing raw volume for series " + series);
    }

    CsvTable demo(std::vector<std::string>{"patient_id", "LIVERBL", "PRENGR1", "ENDSNBL", "AST",
                                           "ALP", "Age", "Denovo", "HGB", "ARM"});
    CsvTable surv(std::vector<std::string>{"patient_id", "time_days", "event"});
    std::vector<const Patient*> sorted_patients;
    for (const auto& p : cohort.patients) sorted_patients.push_back(&p);
    std::sort(sorted_patients.begin(), sorted_patients.end(),
              [](const Patient* a, const Patient* b) { return a->id < b->id; });
    for (const Patient* p : sorted_patients) {
        std::vector<std::string> row{p->id};
        for (double v : p->demographics.values) row.push_back(num17(v));
        demo.add_row(std::move(row));
        surv.add_row({p->id, num17(p->outcome.time_days), std::to_string(p->outcome.event)});
    }
    demo.write_file((dir / "demographics.csv").string());
    surv.write_file((dir / "survival.csv").string());

    CsvTable ann(std::vector<std::string>{"patient_id", "timepoint", "source_group", "series_id",
                                          "lesion_label", "x_mm", "y_mm", "z_mm", "slice_index",
                                          "mask_path"});
    std::vector<const LesionAnnotation*> sorted_ann;
    for (const auto& a : cohort.annotations) sorted_ann.push_back(&a);
    std::sort(sorted_ann.begin(), sorted_ann.end(),
              [](const LesionAnnotation* a, const LesionAnnotation* b) {
                  auto ka = std::tie(a->patient_id, a->timepoint, a->source_group, a->series_id,
                                     a->lesion_label);
                  auto kb = std::tie(b->patient_id, b->timepoint, b->source_group, b->series_id,
                                     b->lesion_label);
                  return ka < kb;
              });
    for (const LesionAnnotation* a : sorted_ann) {
        std::string mask_rel = "masks/" + a->mask_id + ".pgm";
        write_pgm(a->mask, (dir / mask_rel).string());
        ann.add_row({a->patient_id, a->timepoint.label(), to_string(a->source_group), a->series_id,
                     a->lesion_label, num17(a->centroid[0]), num17(a->centroid[1]),
                     num17(a->centroid[2]), std::to_string(a->slice_index), mask_rel});
    }
    ann.write_file((dir / "annotations.csv").string());

    if (!cohort.external_features.empty()) {
        CsvTable ext(std::vector<std::string>{"patient_id", "timepoint", "lesion_label",
                                              "feature_name", "value"});
        std::vector<const ExternalFeatureRow*> sorted_ext;
        for (const auto& r : cohort.external_features) sorted_ext.push_back(&r);
        std::sort(sorted_ext.begin(), sorted_ext.end(),
                  [](const ExternalFeatureRow* a, const ExternalFeatureRow* b) {
                      auto ka = std::tie(a->patient_id, a->timepoint, a->lesion_label,
                                         a->feature_name);
                      auto kb = std::tie(b->patient_id, b->timepoint, b->lesion_label,
                                         b->feature_name);
                      return ka < kb;
                  });
        for (const ExternalFeatureRow* r : sorted_ext)
            ext.add_row({r->patient_id, r->timepoint.label(), r->lesion_label, r->feature_name,
                         num17(r->value)});
        ext.write_file((dir / "external_features.csv").string());
    }
}

DesignSet assemble_design(const Cohort& cohort, const FeatureTable& features,
                          Timepoint max_timepoint) {
    DesignSet out;
    out.feature_names = features.feature_names;
    out.max_timepoint = max_timepoint;
    const std::size_t nf = features.feature_names.size();

    struct Accum {
        std::vector<double> sum;
        std::vector<std::size_t> n;          // per-feature non-degenerate count
        std::size_t lesions = 0;
        Accum() = default;
        explicit Accum(std::size_t nf) : sum(nf, 0.0), n(nf, 0) {}
    };
    // patient -> per-timepoint accumulator
    std::map<std::string, std::array<Accum, Timepoint::kCount>> acc;
    for (const auto& row : features.rows) {
        if (row.values.size() != nf || row.degenerate.size() != nf)
            throw ValidationError("feature table row width mismatch for patient " +
                                  row.patient_id);
        auto& per_tp = acc.try_emplace(row.patient_id).first->second;
        Accum& a = per_tp[row.timepoint.index()];
        if (a.sum.empty()) a = Accum(nf);
        a.lesions += 1;
        for (std::size_t f = 0; f < nf; ++f) {
            if (row.degenerate[f]) continue;
            a.sum[f] += row.values[f];
            a.n[f] += 1;
        }
    }

    for (const auto& p : cohort.patients) {
        auto it = acc.find(p.id);
        // lesion dropout: mean over lesions present; per-feature, degenerate
        // lesion values are left out of the mean
        auto mean_at = [&](int tp, std::vector<double>& vals,
                           std::vector<std::uint8_t>& degen) -> bool {
            if (it == acc.end()) return false;
            const Accum& a = it->second[tp];
            if (a.lesions == 0) return false;
            vals.assign(nf, 0.0);
            degen.assign(nf, 0);
            for (std::size_t f = 0; f < nf; ++f) {
                if (a.n[f] == 0) {
                    degen[f] = 1;
                    vals[f] = std::numeric_limits<double>::quiet_NaN();
                } else {
                    vals[f] = a.sum[f] / static_cast<double>(a.n[f]);
                }
            }
            return true;
        };

        PatientDesign d;
        d.patient_id = p.id;
        d.demographics = p.demographics;
        d.arm = p.demographics.arm();
        d.outcome = p.outcome;
        if (!mean_at(0, d.x, d.x_degenerate)) {
            out.excluded_patients.push_back(p.id);
            continue;  // nothing to baseline deltas against
        }
        for (int tp = 1; tp <= max_timepoint.index(); ++tp) {
            std::vector<double> vals;
            std::vector<std::uint8_t> degen;
            if (!mean_at(tp, vals, degen)) continue;
            auto& dd = d.delta[tp - 1];
            auto& df = d.delta_degenerate[tp - 1];
            dd.assign(nf, 0.0);
            df.assign(nf, 0);
            for (std::size_t f = 0; f < nf; ++f) {
                if (degen[f] || d.x_degenerate[f] || std::fabs(d.x[f]) < kDeltaBaselineEps) {
                    df[f] = 1;
                    dd[f] = std::numeric_limits<double>::quiet_NaN();
                } else {
                    dd[f] = vals[f] / d.x[f];
                }
            }
            d.has_delta[tp - 1] = true;
        }
        out.patients.push_back(std::move(d));
    }
    return out;
}

}  // namespace longrad::cohort
