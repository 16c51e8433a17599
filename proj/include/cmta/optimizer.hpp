#pragma once

#include <cstddef>
#include <vector>

#include "cmta/tensor.hpp"

namespace cmta {

// Adaptive moment estimation with decoupled weight decay. Parameters absent
// from a step's GradientMap (unreachable under an ablation flag) are left
// untouched.
class AdamW {
public:
    struct Options {
        double lr = 2e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 1e-5;
    };

    AdamW(std::vector<Tensor> params, Options opts);

    void step(const GradientMap& grads);
    std::size_t steps_taken() const { return step_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    Options opts_;
    std::size_t step_ = 0;
};

}  // namespace cmta
