#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmta/data.hpp"
#include "cmta/model.hpp"
#include "cmta/survival.hpp"

namespace cmta {

struct TrainOptions {
    ModelConfig model;
    std::size_t folds = 5;
    std::size_t epochs = 30;
    double lr = 2e-4;
    double weight_decay = 1e-5;
    std::uint64_t seed = 0;
    std::size_t threads = 0;  // 0 -> min(folds, hardware concurrency)
};

struct LossRow {
    std::size_t epoch;
    double total;
    double survival;
    double alignment;
};

struct FoldOutcome {
    std::size_t fold;
    double train_cindex = 0.0;
    double test_cindex = 0.0;
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
    std::vector<double> test_risks;
    std::vector<LossRow> loss_log;
    ModelParams params;  // state after the last epoch
};

struct TrainResult {
    ModelConfig config;
    BinEdges bins;
    std::vector<FoldOutcome> folds;
    double train_cindex_mean = 0.0;
    double test_cindex_mean = 0.0;
    double test_cindex_std = 0.0;
};

// One patient per optimization step; folds run independently (optionally in
// parallel) with per-fold seeds, so results do not depend on scheduling.
TrainResult train_cv(const Cohort& cohort, const TrainOptions& opts);

// Risk scores for the given cohort rows under a fixed parameter snapshot.
std::vector<double> compute_risks(const Cohort& cohort, const std::vector<std::size_t>& rows,
                                  const ModelParams& params, const ModelConfig& config);

// Structural fingerprint of one training step's gradients, used by the
// ablation report and its tests.
struct GradientProbe {
    std::vector<std::string> reached;    // parameters present in backward(total)
    std::vector<std::string> unreached;
    double alpha_effective = 0.0;
    double sim_grad_norm = 0.0;            // gradient norm of alpha_eff * L_sim
    double sim_grad_via_targets_norm = 0.0;  // extra gradient flowing through p, g
};

GradientProbe probe_gradients(const PatientRecord& record, const ModelParams& params,
                              const ModelConfig& config, const BinEdges& bins);

}  // namespace cmta
