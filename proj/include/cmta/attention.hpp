#pragma once

#include <cstddef>
#include <vector>

#include "cmta/tensor.hpp"

namespace cmta {

// Multi-head self-attention parameters. Heads store their projections
// separately; h · head_dim must equal the embedding width.
struct MsaParams {
    std::vector<Tensor> q_proj;  // h tensors, each d×d_head
    std::vector<Tensor> k_proj;
    std::vector<Tensor> v_proj;
    Tensor out_proj;  // d×d
    Tensor ln_gain;   // d
    Tensor ln_bias;   // d

    std::size_t heads() const { return q_proj.size(); }
    std::size_t dim() const { return out_proj.rows(); }
    std::size_t head_dim() const { return q_proj.front().cols(); }
};

// Learnable maps of the cross-modal bridge; all square d×d.
struct CrossModalParams {
    Tensor u;
    Tensor v;
    Tensor w_p;
    Tensor w_g;
};

// Three depthwise kernels over d channels, sizes 3/5/7.
struct PpegParams {
    Tensor k3;  // d×3×3
    Tensor k5;  // d×5×5
    Tensor k7;  // d×7×7
};

struct CrossModalOutput {
    Tensor p_related;  // K×d
    Tensor g_related;  // M×d
    Tensor h_p;        // K×M, row-stochastic
    Tensor h_g;        // M×K, row-stochastic
    Tensor logits;     // K×M pre-softmax scores; h_g's logits are its transpose
};

enum class AttentionMode { Exact, Nystrom };

// Newton-Schulz style polynomial iteration approximating the Moore-Penrose
// pseudo-inverse of a square matrix. Fully differentiable.
Tensor iterative_pinv(const Tensor& a, std::size_t iters);

// MSA(LN(tokens)) without the residual; the caller adds it. Nystrom mode
// approximates each head with segment-mean landmarks and iterative_pinv.
Tensor multi_head_self_attention(const Tensor& tokens, const MsaParams& params,
                                 AttentionMode mode = AttentionMode::Exact,
                                 std::size_t landmarks = 0, std::size_t pinv_iters = 6);

// Pyramid position encoding: feature tokens are laid out on the smallest
// square grid (padding repeats leading tokens), run through the three
// depthwise convolutions, summed with the input, and truncated back.
// The class token passes through untouched.
std::pair<Tensor, Tensor> ppeg(const Tensor& class_token, const Tensor& feature_tokens,
                               const PpegParams& params);

// Attention bridge between modality token sets: each of the K genomics-side
// queries distributes over the M pathology tokens and vice versa.
CrossModalOutput cross_modal_attention(const Tensor& p_tokens, const Tensor& g_tokens,
                                       const CrossModalParams& params);

}  // namespace cmta
