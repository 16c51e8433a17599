#pragma once

#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "cmta/tensor.hpp"

namespace cmta {

// Per-interval hazards with the derived survival curve. The censor convention
// throughout is c = true for right-censored (event not observed).
struct SurvivalOutput {
    std::vector<double> hazards;   // B values in (0,1)
    std::vector<double> survival;  // survival[j] = prod_{k<=j} (1 - hazards[k])
    double risk = 0.0;             // -sum_j survival[j], in [-B, 0]
};

SurvivalOutput make_survival_output(const std::vector<double>& hazards);

// Strictly increasing interval thresholds (months). Times at or below the
// first edge fall in bin 0; times above the last edge fall in bin B-1.
class BinEdges {
public:
    BinEdges() = default;
    explicit BinEdges(std::vector<double> edges);

    std::size_t bins() const { return edges_.size() + 1; }
    const std::vector<double>& edges() const { return edges_; }
    std::size_t bin_of(double time) const;

private:
    std::vector<double> edges_;
};

// Edges at the (1/B, ..., (B-1)/B) linear-interpolation quantiles of the
// uncensored survival times.
BinEdges compute_bins(const std::vector<double>& times, const std::vector<bool>& censored,
                      std::size_t bins);

// Kaplan-Meier product-limit curve; one row per distinct event time.
struct KmCurve {
    std::vector<double> times;
    std::vector<std::size_t> at_risk;
    std::vector<std::size_t> events;
    std::vector<double> survival;
};

struct LogrankResult {
    double chi_square = 0.0;
    double p_value = 1.0;
};

enum class AlignmentMetric { L1, Mse, Cosine, Kl };

AlignmentMetric alignment_metric_from_string(const std::string& name);
std::string to_string(AlignmentMetric metric);

// ---- loss graph builders ----------------------------------------------------

// Discrete-time negative log-likelihood of one patient. `hazards` is the 1×B
// in-graph output; values are clamped to [1e-7, 1-1e-7] so the result stays
// finite.
Tensor nll_survival_loss(const Tensor& hazards, std::size_t event_bin, bool censored);

// Distance between intra-modal (p, g) and cross-modal (p_hat, g_hat)
// representations. With detach_targets, p and g enter as graph leaves so the
// objective only pulls p_hat toward p and g_hat toward g.
Tensor alignment_loss(const Tensor& p, const Tensor& p_hat, const Tensor& g, const Tensor& g_hat,
                      AlignmentMetric metric, bool detach_targets);

Tensor total_loss(const Tensor& l_sur, const Tensor& l_sim, double alpha);

// ---- evaluation statistics ----------------------------------------------------

// Harrell's concordance: pairs (i, j) with t_i < t_j and i uncensored score
// 1 when risk_i > risk_j, 0.5 on ties.
double concordance_index(const std::vector<double>& risks, const std::vector<double>& times,
                         const std::vector<bool>& censored);

KmCurve kaplan_meier(const std::vector<double>& times, const std::vector<bool>& censored);

LogrankResult logrank_test(const std::vector<double>& times_a, const std::vector<bool>& censored_a,
                           const std::vector<double>& times_b, const std::vector<bool>& censored_b);

enum class RiskGroup { Low, High };

// Median split; ties at the median go low.
std::vector<RiskGroup> stratify(const std::vector<double>& risks);

// ---- exports -----------------------------------------------------------------

void write_km_csv(std::ostream& out,
                  const std::vector<std::pair<std::string, KmCurve>>& groups);
std::string render_km_svg(const std::vector<std::pair<std::string, KmCurve>>& groups);

}  // namespace cmta
