#include "cmta/train.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>

#include "cmta/errors.hpp"
#include "cmta/optimizer.hpp"
#include "cmta/rng.hpp"

namespace cmta {

namespace {

struct StepLosses {
    Tensor total;
    double survival;
    double alignment;
};

StepLosses build_loss(const PatientRecord& record, const ModelParams& params,
                      const ModelConfig& config, const BinEdges& bins) {
    auto [art, surv] = forward(record, params, config);
    Tensor l_sur = nll_survival_loss(art.hazards, bins.bin_of(record.time_months),
                                     record.censored);
    Tensor l_sim = alignment_loss(art.p, art.p_hat, art.g, art.g_hat, config.alignment_metric,
                                  config.detach_targets);
    StepLosses losses;
    losses.survival = l_sur.value();
    losses.alignment = l_sim.value();
    losses.total = config.use_alignment ? total_loss(l_sur, l_sim, config.alpha) : l_sur;
    return losses;
}

FoldOutcome train_fold(const Cohort& cohort, const FoldSplit& split, std::size_t fold,
                       const BinEdges& bins, const TrainOptions& opts) {
    FoldOutcome out;
    out.fold = fold;
    out.train_ids = split.train_ids;
    out.test_ids = split.test_ids;

    ModelParams params = ModelParams::init(opts.model, opts.seed + 7919 * (fold + 1));
    std::vector<Tensor> tensors;
    for (const NamedParam& p : params.named()) tensors.push_back(p.tensor);
    AdamW::Options adam;
    adam.lr = opts.lr;
    adam.weight_decay = opts.weight_decay;
    AdamW optimizer(std::move(tensors), adam);

    std::vector<std::size_t> train_rows = indices_of(cohort, split.train_ids);
    Rng shuffle_rng(opts.seed + 65537 * (fold + 1));

    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        shuffle_rng.shuffle(train_rows);
        double sum_total = 0.0, sum_sur = 0.0, sum_sim = 0.0;
        for (std::size_t row : train_rows) {
            const PatientRecord& rec = cohort.records[row];
            StepLosses losses = build_loss(rec, params, opts.model, bins);
            const double total = losses.total.value();
            if (!std::isfinite(total)) {
                throw TrainingDiverged("non-finite loss " + std::to_string(total), fold, epoch,
                                       rec.patient_id);
            }
            GradientMap grads = backward(losses.total);
            optimizer.step(grads);
            sum_total += total;
            sum_sur += losses.survival;
            sum_sim += losses.alignment;
        }
        const double n = static_cast<double>(train_rows.size());
        out.loss_log.push_back({epoch, sum_total / n, sum_sur / n, sum_sim / n});
    }

    const std::vector<std::size_t> test_rows = indices_of(cohort, split.test_ids);
    const std::vector<std::size_t> train_eval_rows = indices_of(cohort, split.train_ids);

    auto cindex_of = [&](const std::vector<std::size_t>& rows, const std::vector<double>& risks) {
        std::vector<double> times;
        std::vector<bool> censored;
        for (std::size_t r : rows) {
            times.push_back(cohort.records[r].time_months);
            censored.push_back(cohort.records[r].censored);
        }
        return concordance_index(risks, times, censored);
    };

    out.train_cindex =
        cindex_of(train_eval_rows, compute_risks(cohort, train_eval_rows, params, opts.model));
    out.test_risks = compute_risks(cohort, test_rows, params, opts.model);
    out.test_cindex = cindex_of(test_rows, out.test_risks);
    out.params = std::move(params);
    return out;
}

}  // namespace

std::vector<double> compute_risks(const Cohort& cohort, const std::vector<std::size_t>& rows,
                                  const ModelParams& params, const ModelConfig& config) {
    std::vector<double> risks;
    risks.reserve(rows.size());
    for (std::size_t r : rows) {
        auto [art, surv] = forward(cohort.records[r], params, config);
        risks.push_back(surv.risk);
    }
    return risks;
}

TrainResult train_cv(const Cohort& cohort, const TrainOptions& opts) {
    opts.model.validate();
    if (opts.folds < 2) throw ContractError("train_cv: need at least 2 folds");

    TrainResult result;
    result.config = opts.model;
    result.bins = compute_bins(cohort.times(), cohort.censor_flags(), opts.model.bins);

    const std::vector<FoldSplit> splits = kfold_split(cohort, opts.folds, opts.seed);
    result.folds.resize(splits.size());
    std::vector<std::exception_ptr> errors(splits.size());

    std::size_t workers = opts.threads;
    if (workers == 0) {
        workers = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    }
    workers = std::min(workers, splits.size());

    std::size_t next = 0;
    while (next < splits.size()) {
        const std::size_t batch = std::min(workers, splits.size() - next);
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < batch; ++i) {
            const std::size_t fold = next + i;
            pool.emplace_back([&, fold]() {
                try {
                    result.folds[fold] = train_fold(cohort, splits[fold], fold, result.bins, opts);
                } catch (...) {
                    errors[fold] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        next += batch;
    }
    for (const auto& err : errors) {
        if (err) std::rethrow_exception(err);
    }

    double train_sum = 0.0, test_sum = 0.0;
    for (const FoldOutcome& fold : result.folds) {
        train_sum += fold.train_cindex;
        test_sum += fold.test_cindex;
    }
    const double k = static_cast<double>(result.folds.size());
    result.train_cindex_mean = train_sum / k;
    result.test_cindex_mean = test_sum / k;
    double var = 0.0;
    for (const FoldOutcome& fold : result.folds) {
        const double d = fold.test_cindex - result.test_cindex_mean;
        var += d * d;
    }
    result.test_cindex_std = std::sqrt(var / k);
    return result;
}

GradientProbe probe_gradients(const PatientRecord& record, const ModelParams& params,
                              const ModelConfig& config, const BinEdges& bins) {
    GradientProbe probe;
    probe.alpha_effective = config.use_alignment ? config.alpha : 0.0;

    StepLosses losses = build_loss(record, params, config, bins);
    GradientMap total_map = backward(losses.total);
    for (const NamedParam& p : params.named()) {
        if (total_map.contains(p.tensor)) probe.reached.push_back(p.name);
        else probe.unreached.push_back(p.name);
    }

    auto sim_map_for = [&](bool detach_targets) {
        auto [art, surv] = forward(record, params, config);
        Tensor l_sim = alignment_loss(art.p, art.p_hat, art.g, art.g_hat,
                                      config.alignment_metric, detach_targets);
        return backward(scale(l_sim, probe.alpha_effective));
    };

    GradientMap own = sim_map_for(config.detach_targets);
    double norm2 = 0.0;
    for (const auto& [node, grad] : own) {
        for (double g : grad.values()) norm2 += g * g;
    }
    probe.sim_grad_norm = std::sqrt(norm2);

    GradientMap detached = sim_map_for(true);
    double diff2 = 0.0;
    for (const NamedParam& p : params.named()) {
        const std::vector<double>* a = own.contains(p.tensor) ? &own.at(p.tensor).values() : nullptr;
        const std::vector<double>* b =
            detached.contains(p.tensor) ? &detached.at(p.tensor).values() : nullptr;
        if (!a && !b) continue;
        for (std::size_t i = 0; i < p.tensor.numel(); ++i) {
            const double av = a ? (*a)[i] : 0.0;
            const double bv = b ? (*b)[i] : 0.0;
            diff2 += (av - bv) * (av - bv);
        }
    }
    probe.sim_grad_via_targets_norm = std::sqrt(diff2);
    return probe;
}

}  // namespace cmta
