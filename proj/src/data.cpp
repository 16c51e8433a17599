#include "cmta/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cmta/errors.hpp"
#include "cmta/rng.hpp"

namespace cmta {

namespace {

using nlohmann::json;

void write_u32_le(std::ostream& out, std::uint32_t v) {
    unsigned char buf[4] = {static_cast<unsigned char>(v & 0xff),
                            static_cast<unsigned char>((v >> 8) & 0xff),
                            static_cast<unsigned char>((v >> 16) & 0xff),
                            static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(buf), 4);
}

std::uint32_t read_u32_le(std::istream& in, std::size_t offset, const char* what) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    if (in.gcount() != 4) throw FormatError(std::string("truncated ") + what, offset);
    return static_cast<std::uint32_t>(buf[0]) | (static_cast<std::uint32_t>(buf[1]) << 8) |
           (static_cast<std::uint32_t>(buf[2]) << 16) |
           (static_cast<std::uint32_t>(buf[3]) << 24);
}

std::uint32_t float_bits_le(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    return bits;
}

// Writes the file next to its destination and renames it into place, so a
// crashed run never leaves a partially written artifact.
class AtomicFile {
public:
    explicit AtomicFile(const std::filesystem::path& path)
        : final_path_(path), tmp_path_(path.string() + ".tmp"),
          out_(tmp_path_, std::ios::binary | std::ios::trunc) {
        if (!out_) throw IntegrityError("cannot open " + tmp_path_.string() + " for writing");
    }

    std::ostream& stream() { return out_; }

    void commit() {
        out_.flush();
        if (!out_) throw IntegrityError("write failed for " + tmp_path_.string());
        out_.close();
        std::filesystem::rename(tmp_path_, final_path_);
        committed_ = true;
    }

    ~AtomicFile() {
        if (!committed_) {
            std::error_code ec;
            std::filesystem::remove(tmp_path_, ec);
        }
    }

private:
    std::filesystem::path final_path_;
    std::filesystem::path tmp_path_;
    std::ofstream out_;
    bool committed_ = false;
};

void require_finite(const Tensor& t, const std::string& context) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) {
            throw IntegrityError("non-finite value in " + context);
        }
    }
}

}  // namespace

// ---- record / cohort invariants ------------------------------------------------

void PatientRecord::validate() const {
    if (patient_id.empty()) throw IntegrityError("patient record has an empty id");
    if (!pathology.defined() || pathology.rank() != 2) {
        throw IntegrityError("patient " + patient_id + ": pathology matrix missing");
    }
    if (genomics.empty()) {
        throw IntegrityError("patient " + patient_id + ": no genomic groups");
    }
    for (const Tensor& g : genomics) {
        if (g.rank() != 2 || g.rows() != 1) {
            throw IntegrityError("patient " + patient_id + ": genomic group is not a row vector");
        }
        require_finite(g, "genomics of patient " + patient_id);
    }
    if (!(std::isfinite(time_months) && time_months > 0.0)) {
        throw IntegrityError("patient " + patient_id + ": survival time must be finite and > 0");
    }
    require_finite(pathology, "pathology of patient " + patient_id);
}

void Cohort::validate() const {
    if (records.empty()) throw IntegrityError("empty cohort");
    std::set<std::string> ids;
    const auto widths = records.front().genomics.size();
    const auto path_width = records.front().pathology.cols();
    for (const PatientRecord& rec : records) {
        rec.validate();
        if (!ids.insert(rec.patient_id).second) {
            throw IntegrityError("duplicate patient_id '" + rec.patient_id + "'");
        }
        if (rec.genomics.size() != widths) {
            throw IntegrityError("patient " + rec.patient_id + ": genomic group count differs");
        }
        for (std::size_t k = 0; k < widths; ++k) {
            if (rec.genomics[k].cols() != records.front().genomics[k].cols()) {
                throw IntegrityError("patient " + rec.patient_id + ": genomic group " +
                                     std::to_string(k) + " width differs");
            }
        }
        if (rec.pathology.cols() != path_width) {
            throw IntegrityError("patient " + rec.patient_id + ": pathology width differs");
        }
    }
}

std::vector<double> Cohort::times() const {
    std::vector<double> t;
    t.reserve(records.size());
    for (const auto& r : records) t.push_back(r.time_months);
    return t;
}

std::vector<bool> Cohort::censor_flags() const {
    std::vector<bool> c;
    c.reserve(records.size());
    for (const auto& r : records) c.push_back(r.censored);
    return c;
}

std::vector<std::size_t> Cohort::genomics_widths() const {
    std::vector<std::size_t> w;
    for (const Tensor& g : records.front().genomics) w.push_back(g.cols());
    return w;
}

std::size_t Cohort::pathology_width() const { return records.front().pathology.cols(); }

// ---- CMTM matrix files -----------------------------------------------------------

void write_matrix_file(const std::filesystem::path& path, const Tensor& matrix) {
    if (matrix.rank() != 2) throw ContractError("write_matrix_file: matrix must be rank-2");
    AtomicFile file(path);
    std::ostream& out = file.stream();
    out.write("CMTM", 4);
    write_u32_le(out, static_cast<std::uint32_t>(matrix.rows()));
    write_u32_le(out, static_cast<std::uint32_t>(matrix.cols()));
    for (double v : matrix.values()) {
        write_u32_le(out, float_bits_le(static_cast<float>(v)));
    }
    file.commit();
}

Tensor read_matrix_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open matrix file " + path.string(), 0);

    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "CMTM", 4) != 0) {
        throw FormatError("bad magic in " + path.string() + ", expected CMTM", 0);
    }
    const std::uint32_t rows = read_u32_le(in, 4, "row count");
    const std::uint32_t cols = read_u32_le(in, 8, "column count");
    if (rows == 0 || cols == 0) {
        throw FormatError("zero dimension in " + path.string(), 4);
    }

    const std::size_t count = static_cast<std::size_t>(rows) * cols;
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        unsigned char buf[4];
        in.read(reinterpret_cast<char*>(buf), 4);
        if (in.gcount() != 4) {
            throw FormatError("truncated payload in " + path.string(), 12 + i * 4);
        }
        std::uint32_t bits = static_cast<std::uint32_t>(buf[0]) |
                             (static_cast<std::uint32_t>(buf[1]) << 8) |
                             (static_cast<std::uint32_t>(buf[2]) << 16) |
                             (static_cast<std::uint32_t>(buf[3]) << 24);
        float f;
        std::memcpy(&f, &bits, 4);
        values[i] = static_cast<double>(f);
    }
    return Tensor::from({rows, cols}, std::move(values));
}

// ---- manifest ---------------------------------------------------------------------

Cohort load_cohort(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw FormatError("cannot open manifest " + manifest_path.string(), 0);
    const auto base = manifest_path.parent_path();

    Cohort cohort;
    cohort.provenance = "manifest:" + manifest_path.string();
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::parse_error& e) {
            throw FormatError("manifest line " + std::to_string(line_no) + ": " + e.what(),
                              static_cast<std::size_t>(e.byte));
        }
        try {
            PatientRecord rec;
            rec.patient_id = obj.at("patient_id").get<std::string>();
            rec.time_months = obj.at("time_months").get<double>();
            rec.censored = obj.at("censored").get<bool>();
            rec.pathology =
                read_matrix_file(base / obj.at("pathology_file").get<std::string>());
            for (const auto& f : obj.at("genomics_files")) {
                Tensor g = read_matrix_file(base / f.get<std::string>());
                if (g.rows() != 1) {
                    throw IntegrityError("genomic matrix for patient " + rec.patient_id +
                                         " must have one row");
                }
                rec.genomics.push_back(std::move(g));
            }
            cohort.records.push_back(std::move(rec));
        } catch (const json::exception& e) {
            throw FormatError("manifest line " + std::to_string(line_no) +
                                  ": missing or mistyped field: " + e.what(),
                              0);
        }
    }
    cohort.validate();
    return cohort;
}

void save_cohort(const Cohort& cohort, const std::filesystem::path& dir,
                 const std::string& manifest_name) {
    cohort.validate();
    std::filesystem::create_directories(dir);
    AtomicFile manifest(dir / manifest_name);
    for (const PatientRecord& rec : cohort.records) {
        const std::string path_file = rec.patient_id + "_pathology.cmtm";
        write_matrix_file(dir / path_file, rec.pathology);
        json genomics_files = json::array();
        for (std::size_t k = 0; k < rec.genomics.size(); ++k) {
            const std::string gf = rec.patient_id + "_genomics_" + std::to_string(k) + ".cmtm";
            write_matrix_file(dir / gf, rec.genomics[k]);
            genomics_files.push_back(gf);
        }
        json obj = {{"patient_id", rec.patient_id},
                    {"time_months", rec.time_months},
                    {"censored", rec.censored},
                    {"pathology_file", path_file},
                    {"genomics_files", genomics_files}};
        manifest.stream() << obj.dump() << '\n';
    }
    manifest.commit();
}

// ---- synthetic generator -----------------------------------------------------------

void SyntheticSpec::validate() const {
    if (n_patients == 0) throw ContractError("synthetic spec: n_patients must be positive");
    if (m_min == 0 || m_max < m_min) throw ContractError("synthetic spec: bad patch range");
    if (k_groups == 0) throw ContractError("synthetic spec: k_groups must be positive");
    if (censor_rate < 0.0 || censor_rate >= 1.0) {
        throw ContractError("synthetic spec: censor_rate must lie in [0, 1)");
    }
    if (effect_size < 0.0) throw ContractError("synthetic spec: effect_size must be >= 0");
    if (noise_scale <= 0.0) throw ContractError("synthetic spec: noise_scale must be > 0");
    if (!group_widths.empty() && group_widths.size() != k_groups) {
        throw ContractError("synthetic spec: group_widths length must equal k_groups");
    }
}

std::vector<std::size_t> SyntheticSpec::resolved_widths() const {
    if (!group_widths.empty()) return group_widths;
    return std::vector<std::size_t>(k_groups, 64);
}

SyntheticSpec load_synthetic_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open synthetic spec " + path.string(), 0);
    json obj;
    try {
        obj = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("synthetic spec: ") + e.what(),
                          static_cast<std::size_t>(e.byte));
    }
    SyntheticSpec spec;
    spec.n_patients = obj.value("n_patients", spec.n_patients);
    spec.m_min = obj.value("m_min", spec.m_min);
    spec.m_max = obj.value("m_max", spec.m_max);
    spec.k_groups = obj.value("k_groups", spec.k_groups);
    if (obj.contains("group_widths")) {
        spec.group_widths = obj["group_widths"].get<std::vector<std::size_t>>();
    }
    spec.pathology_width = obj.value("pathology_width", spec.pathology_width);
    spec.effect_size = obj.value("effect_size", spec.effect_size);
    spec.noise_scale = obj.value("noise_scale", spec.noise_scale);
    spec.censor_rate = obj.value("censor_rate", spec.censor_rate);
    spec.time_scale_months = obj.value("time_scale_months", spec.time_scale_months);
    spec.seed = obj.value("seed", spec.seed);
    spec.validate();
    return spec;
}

namespace {

// Quantizing through float keeps save/load round trips bitwise exact.
double as_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace

Cohort generate_synthetic_cohort(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const auto widths = spec.resolved_widths();

    Cohort cohort;
    cohort.provenance = "synthetic:seed=" + std::to_string(spec.seed);
    cohort.records.reserve(spec.n_patients);

    for (std::size_t i = 0; i < spec.n_patients; ++i) {
        const double z = rng.normal();
        const double shift = spec.effect_size * z;

        PatientRecord rec;
        rec.patient_id = "synth_" + std::to_string(i);

        const std::size_t m = spec.m_min + rng.uniform_index(spec.m_max - spec.m_min + 1);
        std::vector<double> patches(m * spec.pathology_width);
        const std::size_t informative = (m + 1) / 2;  // first half of the bag carries signal
        for (std::size_t p = 0; p < m; ++p) {
            const double mean = p < informative ? shift : 0.0;
            for (std::size_t j = 0; j < spec.pathology_width; ++j) {
                patches[p * spec.pathology_width + j] =
                    as_f32(mean + spec.noise_scale * rng.normal());
            }
        }
        rec.pathology = Tensor::from({m, spec.pathology_width}, std::move(patches));

        for (std::size_t k = 0; k < spec.k_groups; ++k) {
            const double mean = k == 0 ? shift : 0.0;  // group 0 carries the genomic signal
            std::vector<double> vec(widths[k]);
            for (double& v : vec) v = as_f32(mean + spec.noise_scale * rng.normal());
            rec.genomics.push_back(Tensor::from({1, widths[k]}, std::move(vec)));
        }

        const double event_time =
            spec.time_scale_months * (-std::log(1.0 - rng.uniform())) / std::exp(shift);
        const bool censor = rng.uniform() < spec.censor_rate;
        if (censor) {
            rec.censored = true;
            rec.time_months = event_time * std::max(rng.uniform(), 1e-9);
        } else {
            rec.censored = false;
            rec.time_months = event_time;
        }
        // Guard the > 0 invariant in the astronomically unlikely zero draw.
        if (rec.time_months <= 0.0) rec.time_months = 1e-9;

        cohort.records.push_back(std::move(rec));
    }
    cohort.validate();
    return cohort;
}

// ---- folds -----------------------------------------------------------------------

std::vector<FoldSplit> kfold_split(const Cohort& cohort, std::size_t k, std::uint64_t seed) {
    const std::size_t n = cohort.size();
    if (k < 2) throw ContractError("kfold_split: k must be at least 2");
    if (k > n) {
        throw ContractError("kfold_split: k=" + std::to_string(k) + " exceeds cohort size " +
                            std::to_string(n));
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    std::vector<FoldSplit> folds(k);
    const std::size_t base = n / k, extra = n % k;
    std::size_t cursor = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t len = base + (f < extra ? 1 : 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::string& id = cohort.records[order[i]].patient_id;
            if (i >= cursor && i < cursor + len) folds[f].test_ids.push_back(id);
            else folds[f].train_ids.push_back(id);
        }
        cursor += len;
    }
    return folds;
}

std::vector<std::size_t> indices_of(const Cohort& cohort, const std::vector<std::string>& ids) {
    std::vector<std::size_t> out;
    out.reserve(ids.size());
    for (const std::string& id : ids) {
        bool found = false;
        for (std::size_t i = 0; i < cohort.size(); ++i) {
            if (cohort.records[i].patient_id == id) {
                out.push_back(i);
                found = true;
                break;
            }
        }
        if (!found) throw IntegrityError("unknown patient_id '" + id + "'");
    }
    return out;
}

}  // namespace cmta
