#pragma once

#include <cmath>
#include <vector>

#include "cmta/rng.hpp"
#include "cmta/tensor.hpp"

namespace cmta_test {

// Central finite differences of a scalar function w.r.t. one parameter
// tensor. `loss_fn` must rebuild its graph from the parameter's current
// values on every call.
template <typename F>
std::vector<double> finite_diff(cmta::Tensor param, F&& loss_fn, double step = 1e-5) {
    std::vector<double> grad(param.numel());
    auto& values = param.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double original = values[i];
        values[i] = original + step;
        const double up = loss_fn();
        values[i] = original - step;
        const double down = loss_fn();
        values[i] = original;
        grad[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

// Sampled variant for large parameters.
template <typename F>
void finite_diff_sampled(cmta::Tensor param, F&& loss_fn, const std::vector<double>& analytic,
                         std::size_t samples, cmta::Rng& rng, double& worst_rel,
                         double step = 1e-5, double zero_tol = 1e-6) {
    auto& values = param.mutable_values();
    for (std::size_t s = 0; s < samples; ++s) {
        const std::size_t i = rng.uniform_index(values.size());
        const double original = values[i];
        values[i] = original + step;
        const double up = loss_fn();
        values[i] = original - step;
        const double down = loss_fn();
        values[i] = original;
        const double fd = (up - down) / (2.0 * step);
        const double denom = std::max(std::abs(analytic[i]), std::abs(fd));
        if (denom <= zero_tol) continue;
        worst_rel = std::max(worst_rel, std::abs(analytic[i] - fd) / denom);
    }
}

// Elementwise relative comparison; entries where both sides are below
// zero_tol are considered matched.
inline double max_rel_error(const std::vector<double>& analytic, const std::vector<double>& fd,
                            double zero_tol = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max(std::abs(analytic[i]), std::abs(fd[i]));
        if (denom <= zero_tol) continue;
        worst = std::max(worst, std::abs(analytic[i] - fd[i]) / denom);
    }
    return worst;
}

inline cmta::Tensor random_tensor(const cmta::Shape& shape, cmta::Rng& rng, double scale = 1.0,
                                  bool requires_grad = true) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    std::vector<double> values(n);
    for (double& v : values) v = scale * rng.normal();
    return cmta::Tensor::from(shape, std::move(values), requires_grad);
}

}  // namespace cmta_test
