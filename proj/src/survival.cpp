#include "cmta/survival.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "cmta/errors.hpp"
#include "cmta/text.hpp"

namespace cmta {

namespace {

constexpr double kHazardClamp = 1e-7;

void check_cohort_arrays(const std::vector<double>& times, const std::vector<bool>& censored,
                         const char* op) {
    if (times.size() != censored.size()) {
        throw ContractError(std::string(op) + ": times and censor flags differ in length");
    }
}

// Linear-interpolation quantile of a sorted sample.
double quantile_sorted(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    if (lo + 1 >= sorted.size()) return sorted.back();
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

// Regularized upper incomplete gamma Q(a, x): series for P when x < a+1,
// Lentz continued fraction for Q otherwise.
double upper_regularized_gamma(double a, double x) {
    if (x <= 0.0) return 1.0;
    const double log_prefactor = -x + a * std::log(x) - std::lgamma(a);
    if (x < a + 1.0) {
        double ap = a;
        double del = 1.0 / a;
        double sum = del;
        for (int i = 0; i < 500; ++i) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::abs(del) < std::abs(sum) * 1e-15) break;
        }
        return 1.0 - sum * std::exp(log_prefactor);
    }
    constexpr double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 500; ++i) {
        const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-15) break;
    }
    return std::exp(log_prefactor) * h;
}

}  // namespace

SurvivalOutput make_survival_output(const std::vector<double>& hazards) {
    SurvivalOutput out;
    out.hazards = hazards;
    out.survival.resize(hazards.size());
    double s = 1.0;
    for (std::size_t j = 0; j < hazards.size(); ++j) {
        s *= 1.0 - hazards[j];
        out.survival[j] = s;
        out.risk -= s;
    }
    return out;
}

BinEdges::BinEdges(std::vector<double> edges) : edges_(std::move(edges)) {
    for (std::size_t i = 1; i < edges_.size(); ++i) {
        if (!(edges_[i - 1] < edges_[i])) {
            throw BinningError("bin edges must be strictly increasing");
        }
    }
}

std::size_t BinEdges::bin_of(double time) const {
    std::size_t j = 0;
    while (j < edges_.size() && time > edges_[j]) ++j;
    return j;
}

BinEdges compute_bins(const std::vector<double>& times, const std::vector<bool>& censored,
                      std::size_t bins) {
    check_cohort_arrays(times, censored, "compute_bins");
    if (bins < 2) throw ContractError("compute_bins: need at least 2 bins");

    std::vector<double> uncensored;
    for (std::size_t i = 0; i < times.size(); ++i) {
        if (!censored[i]) uncensored.push_back(times[i]);
    }
    std::sort(uncensored.begin(), uncensored.end());
    std::vector<double> dedup(uncensored);
    dedup.erase(std::unique(dedup.begin(), dedup.end()), dedup.end());
    if (dedup.size() < bins) {
        throw BinningError("compute_bins: only " + std::to_string(dedup.size()) +
                           " distinct uncensored times; reduce the bin count below " +
                           std::to_string(bins + 1));
    }

    std::vector<double> edges;
    edges.reserve(bins - 1);
    for (std::size_t k = 1; k < bins; ++k) {
        edges.push_back(quantile_sorted(uncensored, static_cast<double>(k) /
                                                        static_cast<double>(bins)));
    }
    for (std::size_t i = 1; i < edges.size(); ++i) {
        if (!(edges[i - 1] < edges[i])) {
            throw BinningError("compute_bins: tied quantiles; reduce the bin count");
        }
    }
    return BinEdges(std::move(edges));
}

// ---- losses -------------------------------------------------------------------

Tensor nll_survival_loss(const Tensor& hazards, std::size_t event_bin, bool censored) {
    if (hazards.rank() != 2 || hazards.rows() != 1) {
        throw ShapeError("nll_survival_loss: hazards must be 1xB, got " +
                         shape_str(hazards.shape()));
    }
    const std::size_t bins = hazards.cols();
    if (event_bin >= bins) {
        throw ContractError("nll_survival_loss: bin " + std::to_string(event_bin) +
                            " out of range for B=" + std::to_string(bins));
    }

    Tensor clamped = clamp(hazards, kHazardClamp, 1.0 - kHazardClamp);
    Tensor log_keep = log(sub(Tensor::full({1, bins}, 1.0), clamped));  // log(1 - h_k)

    if (censored) {
        // -log S_j
        return scale(sum(slice(log_keep, 1, 0, event_bin + 1)), -1.0);
    }
    // -log S_{j-1} - log h_j, with S_{-1} = 1
    Tensor event_term = scale(sum(log(slice(clamped, 1, event_bin, 1))), -1.0);
    if (event_bin == 0) return event_term;
    Tensor survive_term = scale(sum(slice(log_keep, 1, 0, event_bin)), -1.0);
    return add(survive_term, event_term);
}

namespace {

Tensor log_softmax_row(const Tensor& x) {
    Tensor shifted = scalar_add(x, scale(reduce_max(x), -1.0));
    Tensor lse = log(sum(exp(shifted)));
    return scalar_add(shifted, scale(lse, -1.0));
}

Tensor cosine_distance(const Tensor& a, const Tensor& b) {
    Tensor na = sum(mul(a, a));
    Tensor nb = sum(mul(b, b));
    if (na.value() == 0.0 || nb.value() == 0.0) {
        throw DomainError("alignment_loss: cosine metric is undefined for a zero vector");
    }
    Tensor cosine = mul(sum(mul(a, b)), reciprocal(sqrt(mul(na, nb))));
    return add_const(scale(cosine, -1.0), 1.0);
}

Tensor kl_divergence_rows(const Tensor& a, const Tensor& b) {
    Tensor log_pa = log_softmax_row(a);
    Tensor log_pb = log_softmax_row(b);
    return sum(mul(exp(log_pa), sub(log_pa, log_pb)));
}

}  // namespace

Tensor alignment_loss(const Tensor& p, const Tensor& p_hat, const Tensor& g, const Tensor& g_hat,
                      AlignmentMetric metric, bool detach_targets) {
    if (p.shape() != p_hat.shape() || g.shape() != g_hat.shape()) {
        throw ShapeError("alignment_loss: representation shapes disagree");
    }
    if (p.rank() != 2 || p.rows() != 1 || g.rank() != 2 || g.rows() != 1 ||
        p.cols() != g.cols()) {
        throw ShapeError("alignment_loss: expected 1xd representations");
    }
    const double d = static_cast<double>(p.cols());

    Tensor tp = detach_targets ? detach(p) : p;
    Tensor tg = detach_targets ? detach(g) : g;

    switch (metric) {
        case AlignmentMetric::L1:
            return scale(add(sum(abs(sub(tp, p_hat))), sum(abs(sub(tg, g_hat)))), 1.0 / d);
        case AlignmentMetric::Mse: {
            Tensor dp = sub(tp, p_hat);
            Tensor dg = sub(tg, g_hat);
            return scale(add(sum(mul(dp, dp)), sum(mul(dg, dg))), 1.0 / d);
        }
        case AlignmentMetric::Cosine:
            return add(cosine_distance(tp, p_hat), cosine_distance(tg, g_hat));
        case AlignmentMetric::Kl:
            return add(kl_divergence_rows(tp, p_hat), kl_divergence_rows(tg, g_hat));
    }
    throw ContractError("alignment_loss: unknown metric");
}

Tensor total_loss(const Tensor& l_sur, const Tensor& l_sim, double alpha) {
    if (alpha < 0.0) throw ContractError("total_loss: alpha must be non-negative");
    return add(l_sur, scale(l_sim, alpha));
}

AlignmentMetric alignment_metric_from_string(const std::string& name) {
    if (name == "l1") return AlignmentMetric::L1;
    if (name == "mse") return AlignmentMetric::Mse;
    if (name == "cosine") return AlignmentMetric::Cosine;
    if (name == "kl") return AlignmentMetric::Kl;
    throw ContractError("unknown alignment metric '" + name + "'");
}

std::string to_string(AlignmentMetric metric) {
    switch (metric) {
        case AlignmentMetric::L1: return "l1";
        case AlignmentMetric::Mse: return "mse";
        case AlignmentMetric::Cosine: return "cosine";
        case AlignmentMetric::Kl: return "kl";
    }
    return "?";
}

// ---- statistics -----------------------------------------------------------------

double concordance_index(const std::vector<double>& risks, const std::vector<double>& times,
                         const std::vector<bool>& censored) {
    check_cohort_arrays(times, censored, "concordance_index");
    if (risks.size() != times.size()) {
        throw ContractError("concordance_index: risks and times differ in length");
    }
    const std::size_t n = times.size();
    if (n < 2) throw StatisticError("concordance_index: need at least two subjects");

    double pairs = 0.0, score = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (censored[i]) continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j || !(times[i] < times[j])) continue;
            pairs += 1.0;
            if (risks[i] > risks[j]) score += 1.0;
            else if (risks[i] == risks[j]) score += 0.5;
        }
    }
    if (pairs == 0.0) {
        throw StatisticError("concordance_index: no comparable pairs in the sample");
    }
    return score / pairs;
}

KmCurve kaplan_meier(const std::vector<double>& times, const std::vector<bool>& censored) {
    check_cohort_arrays(times, censored, "kaplan_meier");
    if (times.empty()) throw ContractError("kaplan_meier: empty sample");

    std::vector<std::size_t> order(times.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });

    KmCurve curve;
    double s = 1.0;
    std::size_t i = 0;
    const std::size_t n = times.size();
    while (i < n) {
        const double t = times[order[i]];
        std::size_t events = 0, ties = 0;
        while (i + ties < n && times[order[i + ties]] == t) {
            if (!censored[order[i + ties]]) ++events;
            ++ties;
        }
        const std::size_t at_risk = n - i;
        if (events > 0) {
            s *= 1.0 - static_cast<double>(events) / static_cast<double>(at_risk);
            curve.times.push_back(t);
            curve.at_risk.push_back(at_risk);
            curve.events.push_back(events);
            curve.survival.push_back(s);
        }
        i += ties;
    }
    return curve;
}

LogrankResult logrank_test(const std::vector<double>& times_a, const std::vector<bool>& censored_a,
                           const std::vector<double>& times_b,
                           const std::vector<bool>& censored_b) {
    check_cohort_arrays(times_a, censored_a, "logrank_test");
    check_cohort_arrays(times_b, censored_b, "logrank_test");
    if (times_a.empty() || times_b.empty()) {
        throw StatisticError("logrank_test: both groups must be non-empty");
    }

    // Pooled distinct event times.
    std::vector<double> event_times;
    for (std::size_t i = 0; i < times_a.size(); ++i)
        if (!censored_a[i]) event_times.push_back(times_a[i]);
    for (std::size_t i = 0; i < times_b.size(); ++i)
        if (!censored_b[i]) event_times.push_back(times_b[i]);
    if (event_times.empty()) throw StatisticError("logrank_test: no events in either group");
    std::sort(event_times.begin(), event_times.end());
    event_times.erase(std::unique(event_times.begin(), event_times.end()), event_times.end());

    double observed_a = 0.0, expected_a = 0.0, variance = 0.0;
    for (double t : event_times) {
        std::size_t r_a = 0, r_b = 0, d_a = 0, d_b = 0;
        for (std::size_t i = 0; i < times_a.size(); ++i) {
            if (times_a[i] >= t) ++r_a;
            if (times_a[i] == t && !censored_a[i]) ++d_a;
        }
        for (std::size_t i = 0; i < times_b.size(); ++i) {
            if (times_b[i] >= t) ++r_b;
            if (times_b[i] == t && !censored_b[i]) ++d_b;
        }
        const double r = static_cast<double>(r_a + r_b);
        const double d = static_cast<double>(d_a + d_b);
        const double frac_a = static_cast<double>(r_a) / r;
        observed_a += static_cast<double>(d_a);
        expected_a += d * frac_a;
        if (r > 1.0) {
            variance += d * frac_a * (1.0 - frac_a) * (r - d) / (r - 1.0);
        }
    }
    if (variance <= 0.0) {
        throw StatisticError("logrank_test: zero variance, no informative event times");
    }

    LogrankResult result;
    const double diff = observed_a - expected_a;
    result.chi_square = diff * diff / variance;
    result.p_value = upper_regularized_gamma(0.5, result.chi_square / 2.0);
    return result;
}

std::vector<RiskGroup> stratify(const std::vector<double>& risks) {
    if (risks.size() < 2) throw ContractError("stratify: need at least two subjects");
    std::vector<double> sorted(risks);
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    const double median =
        n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    std::vector<RiskGroup> groups(n);
    for (std::size_t i = 0; i < n; ++i) {
        groups[i] = risks[i] <= median ? RiskGroup::Low : RiskGroup::High;
    }
    return groups;
}

// ---- exports --------------------------------------------------------------------

void write_km_csv(std::ostream& out,
                  const std::vector<std::pair<std::string, KmCurve>>& groups) {
    out << "group,time,at_risk,events,survival\n";
    for (const auto& [name, curve] : groups) {
        for (std::size_t i = 0; i < curve.times.size(); ++i) {
            out << name << ',' << g17(curve.times[i]) << ',' << curve.at_risk[i] << ','
                << curve.events[i] << ',' << g17(curve.survival[i]) << '\n';
        }
    }
}

std::string render_km_svg(const std::vector<std::pair<std::string, KmCurve>>& groups) {
    constexpr int width = 640, height = 480;
    constexpr int ml = 60, mr = 20, mt = 20, mb = 50;
    const double plot_w = width - ml - mr, plot_h = height - mt - mb;

    double t_max = 1.0;
    for (const auto& [name, curve] : groups) {
        for (double t : curve.times) t_max = std::max(t_max, t);
    }
    const auto px = [&](double t) { return ml + plot_w * t / t_max; };
    const auto py = [&](double s) { return mt + plot_h * (1.0 - s); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#7f7f7f"};

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    // axes
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
        << mt + plot_h << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt + plot_h << "\" x2=\"" << ml + plot_w
        << "\" y2=\"" << mt + plot_h << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double s = i / 5.0;
        svg << "<text x=\"" << ml - 8 << "\" y=\"" << g6(py(s) + 4)
            << "\" text-anchor=\"end\" font-size=\"12\">" << g6(s) << "</text>\n";
        const double t = t_max * i / 5.0;
        svg << "<text x=\"" << g6(px(t)) << "\" y=\"" << mt + plot_h + 18
            << "\" text-anchor=\"middle\" font-size=\"12\">" << g6(t) << "</text>\n";
    }
    svg << "<text x=\"" << ml + plot_w / 2 << "\" y=\"" << height - 12
        << "\" text-anchor=\"middle\" font-size=\"13\">time (months)</text>\n";
    svg << "<text x=\"16\" y=\"" << mt + plot_h / 2
        << "\" font-size=\"13\" transform=\"rotate(-90 16 " << mt + plot_h / 2
        << ")\" text-anchor=\"middle\">survival probability</text>\n";

    std::size_t gi = 0;
    for (const auto& [name, curve] : groups) {
        const char* color = colors[std::min<std::size_t>(gi, 2)];
        std::ostringstream path;
        double s_prev = 1.0;
        path << "M " << g6(px(0)) << ' ' << g6(py(1.0));
        for (std::size_t i = 0; i < curve.times.size(); ++i) {
            path << " L " << g6(px(curve.times[i])) << ' ' << g6(py(s_prev));
            path << " L " << g6(px(curve.times[i])) << ' ' << g6(py(curve.survival[i]));
            s_prev = curve.survival[i];
        }
        path << " L " << g6(px(t_max)) << ' ' << g6(py(s_prev));
        svg << "<path d=\"" << path.str() << "\" fill=\"none\" stroke=\"" << color
            << "\" stroke-width=\"2\"/>\n";
        svg << "<text x=\"" << ml + plot_w - 150 << "\" y=\"" << mt + 18 + 18 * gi
            << "\" font-size=\"13\" fill=\"" << color << "\">" << name << "</text>\n";
        ++gi;
    }
    svg << "</svg>\n";
    return svg.str();
}

}  // namespace cmta
