#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cmta/tensor.hpp"

namespace cmta {

// One patient: a bag of patch embeddings, K grouped genomic vectors, and the
// observed (possibly right-censored) survival time in months.
struct PatientRecord {
    std::string patient_id;
    Tensor pathology;              // M×pathology_width
    std::vector<Tensor> genomics;  // K vectors, each 1×width_k
    double time_months = 0.0;
    bool censored = false;

    void validate() const;  // throws IntegrityError on violation
};

struct Cohort {
    std::vector<PatientRecord> records;
    std::string provenance;

    std::size_t size() const { return records.size(); }
    std::vector<double> times() const;
    std::vector<bool> censor_flags() const;
    std::vector<std::size_t> genomics_widths() const;
    std::size_t pathology_width() const;

    void validate() const;
};

struct SyntheticSpec {
    std::size_t n_patients = 64;
    std::size_t m_min = 8;   // patches per slide, inclusive range
    std::size_t m_max = 16;
    std::size_t k_groups = 6;
    std::vector<std::size_t> group_widths;  // empty -> all groups take width 64
    std::size_t pathology_width = 1024;
    double effect_size = 2.0;
    double noise_scale = 1.0;
    double censor_rate = 0.3;
    double time_scale_months = 24.0;
    std::uint64_t seed = 0;

    void validate() const;
    std::vector<std::size_t> resolved_widths() const;
};

// JSON-lines manifest, one object per patient referencing CMTM matrix files.
Cohort load_cohort(const std::filesystem::path& manifest_path);
void save_cohort(const Cohort& cohort, const std::filesystem::path& dir,
                 const std::string& manifest_name = "manifest.jsonl");

SyntheticSpec load_synthetic_spec(const std::filesystem::path& path);

// Plants a latent risk z per patient into both modalities (scaled by
// effect_size) and draws survival from an exponential whose rate is
// exp(effect_size * z), so effect_size 0 erases the signal everywhere.
Cohort generate_synthetic_cohort(const SyntheticSpec& spec);

// Matrix container: magic "CMTM", u32 rows, u32 cols, float32 row-major
// payload, all little-endian.
void write_matrix_file(const std::filesystem::path& path, const Tensor& matrix);
Tensor read_matrix_file(const std::filesystem::path& path);

struct FoldSplit {
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
};

// Seeded shuffle, then k contiguous test folds differing in size by at most
// one (larger folds first).
std::vector<FoldSplit> kfold_split(const Cohort& cohort, std::size_t k, std::uint64_t seed);

// Index lookup helper shared by the training harness.
std::vector<std::size_t> indices_of(const Cohort& cohort, const std::vector<std::string>& ids);

}  // namespace cmta
