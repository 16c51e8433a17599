#include "cmta/optimizer.hpp"

#include <cmath>

namespace cmta {

AdamW::AdamW(std::vector<Tensor> params, Options opts)
    : params_(std::move(params)), opts_(opts) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void AdamW::step(const GradientMap& grads) {
    ++step_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));

    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (!grads.contains(params_[i])) continue;
        const auto& g = grads.at(params_[i]).values();
        auto& values = params_[i].mutable_values();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < values.size(); ++j) {
            m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * g[j];
            v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            values[j] -= opts_.lr * (m_hat / (std::sqrt(v_hat) + opts_.eps) +
                                     opts_.weight_decay * values[j]);
        }
    }
}

}  // namespace cmta
