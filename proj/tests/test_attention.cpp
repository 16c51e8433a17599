#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cmta/attention.hpp"
#include "cmta/errors.hpp"
#include "cmta/rng.hpp"
#include "support/finite_diff.hpp"

using namespace cmta;
using cmta_test::finite_diff;
using cmta_test::max_rel_error;
using cmta_test::random_tensor;

namespace {

MsaParams random_msa(Rng& rng, std::size_t d, std::size_t heads) {
    MsaParams msa;
    const std::size_t dh = d / heads;
    for (std::size_t h = 0; h < heads; ++h) {
        msa.q_proj.push_back(random_tensor({d, dh}, rng, 0.3));
        msa.k_proj.push_back(random_tensor({d, dh}, rng, 0.3));
        msa.v_proj.push_back(random_tensor({d, dh}, rng, 0.3));
    }
    msa.out_proj = random_tensor({d, d}, rng, 0.3);
    msa.ln_gain = Tensor::full({d}, 1.0);
    msa.ln_bias = Tensor::zeros({d});
    msa.ln_gain.set_requires_grad(true);
    msa.ln_bias.set_requires_grad(true);
    return msa;
}

CrossModalParams random_cross(Rng& rng, std::size_t d) {
    return {random_tensor({d, d}, rng, 0.4), random_tensor({d, d}, rng, 0.4),
            random_tensor({d, d}, rng, 0.4), random_tensor({d, d}, rng, 0.4)};
}

PpegParams random_ppeg(Rng& rng, std::size_t d) {
    return {random_tensor({d, 3, 3}, rng, 0.2), random_tensor({d, 5, 5}, rng, 0.2),
            random_tensor({d, 7, 7}, rng, 0.2)};
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
    }
    return worst;
}

}  // namespace

TEST_CASE("iterative_pinv on identity and a diagonal") {
    Tensor z = iterative_pinv(Tensor::identity(3), 6);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            CHECK(std::abs(z.at(i, j) - (i == j ? 1.0 : 0.0)) < 1e-10);

    Tensor diag = Tensor::from_rows({{2, 0}, {0, 4}});
    Tensor inv = iterative_pinv(diag, 8);
    CHECK(inv.at(0, 0) == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(inv.at(1, 1) == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(std::abs(inv.at(0, 1)) < 1e-6);
    CHECK(std::abs(inv.at(1, 0)) < 1e-6);

    CHECK_THROWS_AS(iterative_pinv(Tensor::zeros({2, 3}), 6), ContractError);
    CHECK_THROWS_AS(iterative_pinv(Tensor::identity(2), 0), ContractError);
}

TEST_CASE("iterative_pinv satisfies A Z A = A for row-stochastic input") {
    Rng rng(99);
    Tensor logits = random_tensor({4, 4}, rng, 1.0, false);
    Tensor a = softmax(logits, 1);
    Tensor z = iterative_pinv(a, 6);
    Tensor aza = matmul(matmul(a, z), a);
    CHECK(max_abs_diff(aza, a) < 1e-4);

    // more iterations keep improving the reconstruction
    Tensor z12 = iterative_pinv(a, 12);
    CHECK(max_abs_diff(matmul(matmul(a, z12), a), a) < 1e-10);
}

TEST_CASE("exact attention on a single token reduces to projections") {
    Rng rng(22);
    const std::size_t d = 8;
    MsaParams msa = random_msa(rng, d, 2);
    Tensor token = random_tensor({1, d}, rng, 1.0, false);

    Tensor out = multi_head_self_attention(token, msa, AttentionMode::Exact);

    Tensor normed = layer_norm(token, msa.ln_gain, msa.ln_bias);
    Tensor expected = matmul(
        concat(matmul(normed, msa.v_proj[0]), matmul(normed, msa.v_proj[1]), 1), msa.out_proj);
    CHECK(max_abs_diff(out, expected) < 1e-12);
}

TEST_CASE("exact attention is permutation equivariant") {
    Rng rng(23);
    const std::size_t n = 6, d = 8;
    MsaParams msa = random_msa(rng, d, 2);
    Tensor tokens = random_tensor({n, d}, rng, 1.0, false);
    Tensor out = multi_head_self_attention(tokens, msa, AttentionMode::Exact);

    // rotate the rows by one
    Tensor rotated = concat(slice(tokens, 0, 1, n - 1), slice(tokens, 0, 0, 1), 0);
    Tensor out_rot = multi_head_self_attention(rotated, msa, AttentionMode::Exact);
    Tensor expected = concat(slice(out, 0, 1, n - 1), slice(out, 0, 0, 1), 0);
    CHECK(max_abs_diff(out_rot, expected) < 1e-10);
}

TEST_CASE("nystrom with landmarks = n reproduces exact attention") {
    // The six-step pseudo-inverse resolves the attention core to 1e-3 only
    // when the core is well conditioned; small projection scales keep the
    // fixture inside that regime (see the acceptance suite for the sweep).
    Rng rng(24);
    const std::size_t n = 8, d = 16;
    MsaParams msa = random_msa(rng, d, 2);
    for (Tensor* w : {&msa.q_proj[0], &msa.q_proj[1], &msa.k_proj[0], &msa.k_proj[1]}) {
        for (double& v : w->mutable_values()) v *= 0.005 / 0.3;
    }
    Tensor tokens = random_tensor({n, d}, rng, 1.0, false);
    Tensor exact = multi_head_self_attention(tokens, msa, AttentionMode::Exact);
    Tensor approx = multi_head_self_attention(tokens, msa, AttentionMode::Nystrom, n, 6);
    CHECK(max_abs_diff(exact, approx) < 1e-3);

    // at init-scale projections the same reconstruction needs more steps
    Rng rng2(24);
    MsaParams wide = random_msa(rng2, d, 2);
    Tensor tokens2 = random_tensor({n, d}, rng2, 1.0, false);
    Tensor exact2 = multi_head_self_attention(tokens2, wide, AttentionMode::Exact);
    Tensor approx2 = multi_head_self_attention(tokens2, wide, AttentionMode::Nystrom, n, 12);
    CHECK(max_abs_diff(exact2, approx2) < 1e-3);
}

TEST_CASE("nystrom contract errors") {
    Rng rng(25);
    MsaParams msa = random_msa(rng, 8, 2);
    Tensor tokens = random_tensor({4, 8}, rng, 1.0, false);
    CHECK_THROWS_AS(multi_head_self_attention(tokens, msa, AttentionMode::Nystrom, 5, 6),
                    ContractError);
    CHECK_THROWS_AS(multi_head_self_attention(tokens, msa, AttentionMode::Nystrom, 0, 6),
                    ContractError);
}

TEST_CASE("msa gradients match finite differences in both modes") {
    Rng rng(26);
    const std::size_t n = 6, d = 8;
    MsaParams msa = random_msa(rng, d, 2);
    Tensor tokens = random_tensor({n, d}, rng);
    Tensor w = random_tensor({n, d}, rng, 1.0, false);

    for (AttentionMode mode : {AttentionMode::Exact, AttentionMode::Nystrom}) {
        const std::size_t landmarks = mode == AttentionMode::Nystrom ? 3 : 0;
        auto loss_value = [&]() {
            return sum(mul(multi_head_self_attention(tokens, msa, mode, landmarks, 6), w))
                .value();
        };
        GradientMap grads =
            backward(sum(mul(multi_head_self_attention(tokens, msa, mode, landmarks, 6), w)));
        CHECK(max_rel_error(grads.at(tokens).values(), finite_diff(tokens, loss_value)) < 1e-4);
        CHECK(max_rel_error(grads.at(msa.q_proj[0]).values(),
                            finite_diff(msa.q_proj[0], loss_value)) < 1e-4);
        CHECK(max_rel_error(grads.at(msa.out_proj).values(),
                            finite_diff(msa.out_proj, loss_value)) < 1e-4);
    }
}

TEST_CASE("ppeg grid layout, padding rule, and passthrough") {
    Rng rng(27);
    const std::size_t d = 4;
    PpegParams params = random_ppeg(rng, d);
    Tensor cls = random_tensor({1, d}, rng, 1.0, false);

    // perfect square: no padding
    Tensor nine = random_tensor({9, d}, rng, 1.0, false);
    auto [c9, f9] = ppeg(cls, nine, params);
    CHECK(f9.rows() == 9);
    CHECK(f9.cols() == d);
    CHECK(c9.values() == cls.values());

    // n=5 pads to 9 by repeating tokens 1..4; compare against the padding done
    // by hand
    Tensor five = random_tensor({5, d}, rng, 1.0, false);
    auto [c5, f5] = ppeg(cls, five, params);
    CHECK(f5.rows() == 5);
    Tensor hand_padded = concat(five, slice(five, 0, 0, 4), 0);
    auto [ch, fh] = ppeg(cls, hand_padded, params);
    Tensor expected = slice(fh, 0, 0, 5);
    CHECK(max_abs_diff(f5, expected) < 1e-12);
}

TEST_CASE("ppeg with zero kernels is the identity on features") {
    Rng rng(28);
    const std::size_t d = 3;
    PpegParams zeros{Tensor::zeros({d, 3, 3}), Tensor::zeros({d, 5, 5}), Tensor::zeros({d, 7, 7})};
    Tensor cls = random_tensor({1, d}, rng, 1.0, false);
    Tensor feats = random_tensor({7, d}, rng, 1.0, false);
    auto [c, f] = ppeg(cls, feats, zeros);
    CHECK(max_abs_diff(f, feats) == 0.0);
    CHECK(c.values() == cls.values());

    // single token: 1x1 grid
    Tensor one = random_tensor({1, d}, rng, 1.0, false);
    auto [c1, f1] = ppeg(cls, one, zeros);
    CHECK(f1.rows() == 1);
}

TEST_CASE("ppeg is not permutation equivariant") {
    Rng rng(29);
    const std::size_t d = 4;
    PpegParams params = random_ppeg(rng, d);
    Tensor cls = Tensor::zeros({1, d});
    Tensor feats = random_tensor({9, d}, rng, 1.0, false);
    auto [c, f] = ppeg(cls, feats, params);

    Tensor rotated = concat(slice(feats, 0, 1, 8), slice(feats, 0, 0, 1), 0);
    auto [cr, fr] = ppeg(cls, rotated, params);
    Tensor expected_if_equivariant = concat(slice(f, 0, 1, 8), slice(f, 0, 0, 1), 0);
    CHECK(max_abs_diff(fr, expected_if_equivariant) > 1e-6);
}

TEST_CASE("cross modal attention shapes and row-stochastic maps") {
    Rng rng(30);
    const std::size_t m = 3, k = 2, d = 4;
    CrossModalParams params = random_cross(rng, d);
    Tensor p = random_tensor({m, d}, rng, 1.0, false);
    Tensor g = random_tensor({k, d}, rng, 1.0, false);

    CrossModalOutput out = cross_modal_attention(p, g, params);
    CHECK(out.h_p.rows() == k);
    CHECK(out.h_p.cols() == m);
    CHECK(out.h_g.rows() == m);
    CHECK(out.h_g.cols() == k);
    CHECK(out.p_related.rows() == k);
    CHECK(out.p_related.cols() == d);
    CHECK(out.g_related.rows() == m);
    CHECK(out.g_related.cols() == d);

    for (const Tensor* map : {&out.h_p, &out.h_g}) {
        for (std::size_t i = 0; i < map->rows(); ++i) {
            double total = 0.0;
            for (std::size_t j = 0; j < map->cols(); ++j) {
                CHECK(map->at(i, j) >= 0.0);
                total += map->at(i, j);
            }
            CHECK(std::abs(total - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("cross modal attention with zero U gives uniform rows and column means") {
    Rng rng(31);
    const std::size_t m = 5, k = 3, d = 4;
    CrossModalParams params = random_cross(rng, d);
    params.u = Tensor::zeros({d, d});
    Tensor p = random_tensor({m, d}, rng, 1.0, false);
    Tensor g = random_tensor({k, d}, rng, 1.0, false);

    CrossModalOutput out = cross_modal_attention(p, g, params);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < m; ++j)
            CHECK(out.h_p.at(i, j) == doctest::Approx(1.0 / m).epsilon(1e-12));

    Tensor pw = matmul(p, params.w_p);
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < m; ++i) mean += pw.at(i, j);
        mean /= static_cast<double>(m);
        for (std::size_t i = 0; i < k; ++i)
            CHECK(out.p_related.at(i, j) == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("cross modal attention scalar hand computation") {
    Tensor p = Tensor::from_rows({{1}, {2}});
    Tensor g = Tensor::from_rows({{1}});
    CrossModalParams params{Tensor::from_rows({{1}}), Tensor::from_rows({{1}}),
                            Tensor::from_rows({{1}}), Tensor::from_rows({{1}})};
    CrossModalOutput out = cross_modal_attention(p, g, params);
    CHECK(out.h_p.at(0, 0) == doctest::Approx(0.26894142137).epsilon(1e-9));
    CHECK(out.h_p.at(0, 1) == doctest::Approx(0.73105857863).epsilon(1e-9));
    CHECK(out.p_related.at(0, 0) == doctest::Approx(1.73105857863).epsilon(1e-9));
}

TEST_CASE("h_g is the row softmax of transposed h_p logits, not h_p transposed") {
    Rng rng(32);
    const std::size_t m = 4, k = 3, d = 6;
    CrossModalParams params = random_cross(rng, d);
    Tensor p = random_tensor({m, d}, rng, 1.0, false);
    Tensor g = random_tensor({k, d}, rng, 1.0, false);
    CrossModalOutput out = cross_modal_attention(p, g, params);

    Tensor from_logits = softmax(transpose(out.logits), 1);
    CHECK(max_abs_diff(out.h_g, from_logits) < 1e-12);

    double asymmetry = 0.0;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j)
            asymmetry = std::max(asymmetry, std::abs(out.h_g.at(i, j) - out.h_p.at(j, i)));
    CHECK(asymmetry > 1e-6);
}

TEST_CASE("shared positive rescaling keeps the maps row-stochastic") {
    Rng rng(33);
    const std::size_t m = 4, k = 3, d = 5;
    CrossModalParams params = random_cross(rng, d);
    Tensor p = random_tensor({m, d}, rng, 1.0, false);
    Tensor g = random_tensor({k, d}, rng, 1.0, false);

    for (double c : {1e-3, 1.0, 50.0}) {
        CrossModalOutput out = cross_modal_attention(scale(p, c), scale(g, c), params);
        for (const Tensor* map : {&out.h_p, &out.h_g}) {
            for (std::size_t i = 0; i < map->rows(); ++i) {
                double total = 0.0;
                for (std::size_t j = 0; j < map->cols(); ++j) {
                    CHECK(map->at(i, j) >= 0.0);
                    total += map->at(i, j);
                }
                CHECK(std::abs(total - 1.0) < 1e-9);
            }
        }
    }
}

TEST_CASE("cross modal attention validates widths") {
    Rng rng(34);
    CrossModalParams params = random_cross(rng, 4);
    Tensor p = random_tensor({3, 4}, rng, 1.0, false);
    Tensor g = random_tensor({2, 5}, rng, 1.0, false);
    CHECK_THROWS_AS(cross_modal_attention(p, g, params), ShapeError);
}

TEST_CASE("cross modal gradients match finite differences") {
    Rng rng(35);
    const std::size_t m = 3, k = 2, d = 4;
    CrossModalParams params = random_cross(rng, d);
    Tensor p = random_tensor({m, d}, rng);
    Tensor g = random_tensor({k, d}, rng);
    Tensor wp = random_tensor({k, d}, rng, 1.0, false);
    Tensor wg = random_tensor({m, d}, rng, 1.0, false);

    auto loss_value = [&]() {
        CrossModalOutput out = cross_modal_attention(p, g, params);
        return add(sum(mul(out.p_related, wp)), sum(mul(out.g_related, wg))).value();
    };
    CrossModalOutput out = cross_modal_attention(p, g, params);
    GradientMap grads =
        backward(add(sum(mul(out.p_related, wp)), sum(mul(out.g_related, wg))));
    for (Tensor* t : {&p, &g, &params.u, &params.v, &params.w_p, &params.w_g}) {
        CHECK(max_rel_error(grads.at(*t).values(), finite_diff(*t, loss_value)) < 1e-4);
    }
}
