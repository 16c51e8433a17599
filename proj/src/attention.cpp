#include "cmta/attention.hpp"

#include <cmath>

#include "cmta/errors.hpp"

namespace cmta {

namespace {

// Constant m×n row-stochastic matrix averaging contiguous token segments;
// segment i covers rows [floor(i·n/m), floor((i+1)·n/m)).
Tensor segment_mean_matrix(std::size_t n, std::size_t m) {
    Tensor s = Tensor::zeros({m, n});
    auto& v = s.mutable_values();
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t lo = i * n / m;
        const std::size_t hi = (i + 1) * n / m;
        for (std::size_t j = lo; j < hi; ++j) v[i * n + j] = 1.0 / static_cast<double>(hi - lo);
    }
    return s;
}

void validate_msa(const Tensor& tokens, const MsaParams& params) {
    if (params.q_proj.empty()) throw ContractError("msa: parameter set has no heads");
    const std::size_t d = tokens.cols();
    if (params.heads() * params.head_dim() != d || params.dim() != d) {
        throw ShapeError("msa: head projections do not tile the embedding width " +
                         std::to_string(d));
    }
}

}  // namespace

Tensor iterative_pinv(const Tensor& a, std::size_t iters) {
    if (a.rank() != 2 || a.rows() != a.cols()) {
        throw ContractError("iterative_pinv: input must be square, got " + shape_str(a.shape()));
    }
    if (iters == 0) throw ContractError("iterative_pinv: need at least one iteration");
    const std::size_t m = a.rows();

    Tensor abs_a = abs(a);
    Tensor ones_row = Tensor::full({1, m}, 1.0);
    Tensor ones_col = Tensor::full({m, 1}, 1.0);
    Tensor max_col_sum = reduce_max(matmul(ones_row, abs_a));
    Tensor max_row_sum = reduce_max(matmul(abs_a, ones_col));
    Tensor z = scalar_mul(transpose(a), reciprocal(mul(max_col_sum, max_row_sum)));

    Tensor eye = Tensor::identity(m);
    for (std::size_t it = 0; it < iters; ++it) {
        Tensor az = matmul(a, z);
        Tensor t = sub(scale(eye, 7.0), az);
        t = sub(scale(eye, 15.0), matmul(az, t));
        t = sub(scale(eye, 13.0), matmul(az, t));
        z = scale(matmul(z, t), 0.25);
    }
    return z;
}

Tensor multi_head_self_attention(const Tensor& tokens, const MsaParams& params,
                                 AttentionMode mode, std::size_t landmarks,
                                 std::size_t pinv_iters) {
    validate_msa(tokens, params);
    const std::size_t n = tokens.rows();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(params.head_dim()));

    if (mode == AttentionMode::Nystrom) {
        if (landmarks == 0) throw ContractError("msa: nystrom mode needs landmarks >= 1");
        if (landmarks > n) {
            throw ContractError("msa: " + std::to_string(landmarks) + " landmarks exceed " +
                                std::to_string(n) + " tokens");
        }
    }

    Tensor normed = layer_norm(tokens, params.ln_gain, params.ln_bias);

    Tensor seg;
    if (mode == AttentionMode::Nystrom) seg = segment_mean_matrix(n, landmarks);

    Tensor heads_out;
    for (std::size_t h = 0; h < params.heads(); ++h) {
        Tensor q = matmul(normed, params.q_proj[h]);
        Tensor k = matmul(normed, params.k_proj[h]);
        Tensor v = matmul(normed, params.v_proj[h]);

        Tensor head;
        if (mode == AttentionMode::Exact) {
            Tensor attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt_dh), 1);
            head = matmul(attn, v);
        } else {
            Tensor qm = matmul(seg, q);
            Tensor km = matmul(seg, k);
            Tensor f = softmax(scale(matmul(q, transpose(km)), inv_sqrt_dh), 1);
            Tensor core = softmax(scale(matmul(qm, transpose(km)), inv_sqrt_dh), 1);
            Tensor b = softmax(scale(matmul(qm, transpose(k)), inv_sqrt_dh), 1);
            Tensor z = iterative_pinv(core, pinv_iters);
            head = matmul(f, matmul(z, matmul(b, v)));
        }
        heads_out = h == 0 ? head : concat(heads_out, head, 1);
    }
    return matmul(heads_out, params.out_proj);
}

std::pair<Tensor, Tensor> ppeg(const Tensor& class_token, const Tensor& feature_tokens,
                               const PpegParams& params) {
    const std::size_t n = feature_tokens.rows();
    const std::size_t d = feature_tokens.cols();
    if (class_token.rank() != 2 || class_token.rows() != 1 || class_token.cols() != d) {
        throw ShapeError("ppeg: class token must be 1x" + std::to_string(d) + ", got " +
                         shape_str(class_token.shape()));
    }
    if (params.k3.shape()[0] != d || params.k5.shape()[0] != d || params.k7.shape()[0] != d) {
        throw ShapeError("ppeg: kernel channel count does not match token width " +
                         std::to_string(d));
    }

    const std::size_t side =
        static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
    const std::size_t pad = side * side - n;

    Tensor padded = pad == 0 ? feature_tokens
                             : concat(feature_tokens, slice(feature_tokens, 0, 0, pad), 0);
    Tensor grid = reshape(transpose(padded), {d, side, side});
    Tensor mixed = add(grid, depthwise_conv2d(grid, params.k3));
    mixed = add(mixed, depthwise_conv2d(grid, params.k5));
    mixed = add(mixed, depthwise_conv2d(grid, params.k7));
    Tensor flat = transpose(reshape(mixed, {d, side * side}));
    Tensor out = pad == 0 ? flat : slice(flat, 0, 0, n);
    return {class_token, out};
}

CrossModalOutput cross_modal_attention(const Tensor& p_tokens, const Tensor& g_tokens,
                                       const CrossModalParams& params) {
    const std::size_t d = p_tokens.cols();
    if (g_tokens.cols() != d) {
        throw ShapeError("cross_modal_attention: token widths disagree, " +
                         shape_str(p_tokens.shape()) + " vs " + shape_str(g_tokens.shape()));
    }
    for (const Tensor* w : {&params.u, &params.v, &params.w_p, &params.w_g}) {
        if (w->rank() != 2 || w->rows() != d || w->cols() != d) {
            throw ShapeError("cross_modal_attention: parameters must be " + std::to_string(d) +
                             "x" + std::to_string(d) + ", got " + shape_str(w->shape()));
        }
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    Tensor gu = matmul(g_tokens, params.u);
    Tensor pv = matmul(p_tokens, params.v);

    CrossModalOutput out;
    out.logits = scale(matmul(gu, transpose(pv)), inv_sqrt_d);  // K×M
    out.h_p = softmax(out.logits, 1);
    out.h_g = softmax(scale(matmul(pv, transpose(gu)), inv_sqrt_d), 1);  // M×K
    out.p_related = matmul(out.h_p, matmul(p_tokens, params.w_p));
    out.g_related = matmul(out.h_g, matmul(g_tokens, params.w_g));
    return out;
}

}  // namespace cmta
