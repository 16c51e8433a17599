#pragma once

// Independent reference implementations used to freeze expected values.
// These deliberately share no code with the library: statistics are computed
// by explicit pair/risk-set enumeration.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <vector>

namespace cmta_test {

// Harrell's c-index by exhaustive pair enumeration. Returns nullopt when no
// pair is comparable.
inline std::optional<double> oracle_cindex(const std::vector<double>& risks,
                                           const std::vector<double>& times,
                                           const std::vector<bool>& censored) {
    if (times.size() < 2) return std::nullopt;
    long double numer = 0.0L;
    long long pairs = 0;
    for (std::size_t i = 0; i < times.size(); ++i) {
        for (std::size_t j = 0; j < times.size(); ++j) {
            if (i == j) continue;
            if (censored[i] || times[i] >= times[j]) continue;
            ++pairs;
            if (risks[i] > risks[j]) numer += 1.0L;
            else if (risks[i] == risks[j]) numer += 0.5L;
        }
    }
    if (pairs == 0) return std::nullopt;
    return static_cast<double>(numer / static_cast<long double>(pairs));
}

struct OracleKmRow {
    double time;
    std::size_t at_risk;
    std::size_t events;
    double survival;
};

// Product-limit estimate traced through an explicit per-time risk-set scan.
inline std::vector<OracleKmRow> oracle_km(const std::vector<double>& times,
                                          const std::vector<bool>& censored) {
    std::vector<double> distinct(times);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

    std::vector<OracleKmRow> rows;
    double s = 1.0;
    for (double t : distinct) {
        std::size_t at_risk = 0, events = 0;
        for (std::size_t i = 0; i < times.size(); ++i) {
            if (times[i] >= t) ++at_risk;
            if (times[i] == t && !censored[i]) ++events;
        }
        if (events == 0) continue;
        s *= 1.0 - static_cast<double>(events) / static_cast<double>(at_risk);
        rows.push_back({t, at_risk, events, s});
    }
    return rows;
}

// Two-group logrank chi-square via a direct hypergeometric worksheet over the
// pooled event times. Returns nullopt when every term contributes zero
// variance.
inline std::optional<double> oracle_logrank_chi2(const std::vector<double>& ta,
                                                 const std::vector<bool>& ca,
                                                 const std::vector<double>& tb,
                                                 const std::vector<bool>& cb) {
    std::map<double, int> event_times;
    for (std::size_t i = 0; i < ta.size(); ++i)
        if (!ca[i]) event_times[ta[i]] = 1;
    for (std::size_t i = 0; i < tb.size(); ++i)
        if (!cb[i]) event_times[tb[i]] = 1;
    if (event_times.empty()) return std::nullopt;

    long double oa = 0.0L, ea = 0.0L, var = 0.0L;
    for (const auto& [t, unused] : event_times) {
        (void)unused;
        long double ra = 0, rb = 0, da = 0, db = 0;
        for (std::size_t i = 0; i < ta.size(); ++i) {
            if (ta[i] >= t) ra += 1;
            if (ta[i] == t && !ca[i]) da += 1;
        }
        for (std::size_t i = 0; i < tb.size(); ++i) {
            if (tb[i] >= t) rb += 1;
            if (tb[i] == t && !cb[i]) db += 1;
        }
        const long double r = ra + rb;
        const long double d = da + db;
        oa += da;
        ea += d * ra / r;
        if (r > 1) var += d * (ra / r) * (1 - ra / r) * (r - d) / (r - 1);
    }
    if (var <= 0) return std::nullopt;
    const long double diff = oa - ea;
    return static_cast<double>(diff * diff / var);
}

// Exp-normalize in extended precision.
inline std::vector<double> oracle_softmax(const std::vector<double>& x) {
    long double mx = x[0];
    for (double v : x) mx = std::max<long double>(mx, v);
    long double denom = 0.0L;
    std::vector<long double> e(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        e[i] = std::exp(static_cast<long double>(x[i]) - mx);
        denom += e[i];
    }
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(e[i] / denom);
    return out;
}

}  // namespace cmta_test
