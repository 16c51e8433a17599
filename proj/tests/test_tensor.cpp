#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cmta/errors.hpp"
#include "cmta/rng.hpp"
#include "cmta/tensor.hpp"
#include "support/finite_diff.hpp"
#include "support/oracles.hpp"

using namespace cmta;
using cmta_test::finite_diff;
using cmta_test::max_rel_error;
using cmta_test::random_tensor;

TEST_CASE("matmul identity and hand dot product") {
    Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
    Tensor out = matmul(Tensor::identity(2), a);
    CHECK(out.values() == a.values());

    Tensor row = Tensor::from_rows({{1, 2}});
    Tensor col = Tensor::from_rows({{3}, {4}});
    CHECK(matmul(row, col).value() == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 2});
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(11);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    auto loss = [&]() { return sum(matmul(a, b)).value(); };
    GradientMap grads = backward(sum(matmul(a, b)));
    CHECK(max_rel_error(grads.at(a).values(), finite_diff(a, loss)) < 1e-6);
    CHECK(max_rel_error(grads.at(b).values(), finite_diff(b, loss)) < 1e-6);
}

TEST_CASE("softmax basics") {
    Tensor flat = softmax(Tensor::from({3}, {0, 0, 0}), 0);
    for (double v : flat.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

    // large logit gap must not overflow
    Tensor extreme = softmax(Tensor::from({2}, {1000, 0}), 0);
    CHECK(extreme.values()[0] == doctest::Approx(1.0));
    CHECK(extreme.values()[1] == doctest::Approx(0.0));
    CHECK(std::isfinite(extreme.values()[0]));

    Tensor probs = softmax(Tensor::from({3}, {1, 2, 3}), 0);
    auto expected = cmta_test::oracle_softmax({1, 2, 3});
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(probs.values()[i] == doctest::Approx(expected[i]).epsilon(1e-14));
    }
}

TEST_CASE("softmax slices sum to one on random input, both axes") {
    Rng rng(5);
    Tensor x = random_tensor({7, 5}, rng, 3.0, false);
    for (std::size_t axis : {std::size_t{0}, std::size_t{1}}) {
        Tensor y = softmax(x, axis);
        const std::size_t slices = axis == 0 ? x.cols() : x.rows();
        for (std::size_t s = 0; s < slices; ++s) {
            double total = 0.0;
            for (std::size_t i = 0; i < (axis == 0 ? x.rows() : x.cols()); ++i) {
                total += axis == 0 ? y.at(i, s) : y.at(s, i);
            }
            CHECK(std::abs(total - 1.0) < 1e-12);
        }
    }
    CHECK_THROWS_AS(softmax(x, 2), ShapeError);
}

TEST_CASE("softmax gradient matches finite differences") {
    Rng rng(6);
    Tensor x = random_tensor({4, 3}, rng);
    Tensor w = random_tensor({4, 3}, rng, 1.0, false);  // weights make the grad non-uniform
    auto loss = [&]() { return sum(mul(softmax(x, 1), w)).value(); };
    GradientMap grads = backward(sum(mul(softmax(x, 1), w)));
    CHECK(max_rel_error(grads.at(x).values(), finite_diff(x, loss)) < 1e-4);
}

TEST_CASE("layer_norm handles constant and normalized rows") {
    Tensor gain = Tensor::full({3}, 1.0);
    Tensor bias = Tensor::zeros({3});
    Tensor constant_row = layer_norm(Tensor::from_rows({{5, 5, 5}}), gain, bias);
    for (double v : constant_row.values()) CHECK(v == doctest::Approx(0.0));

    Tensor gain2 = Tensor::full({2}, 1.0);
    Tensor bias2 = Tensor::zeros({2});
    Tensor pm = layer_norm(Tensor::from_rows({{1, -1}}), gain2, bias2);
    CHECK(pm.values()[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(pm.values()[1] == doctest::Approx(-1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm statistics on random input") {
    Rng rng(7);
    Tensor x = random_tensor({4, 8}, rng, 1.0, false);
    Tensor y = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}));
    for (std::size_t i = 0; i < 4; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < 8; ++j) mean += y.at(i, j);
        mean /= 8;
        for (std::size_t j = 0; j < 8; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
        var /= 8;
        CHECK(std::abs(mean) < 1e-10);
        CHECK(std::abs(var - 1.0) < 1e-3);
    }
}

TEST_CASE("layer_norm gradients match finite differences") {
    Rng rng(8);
    Tensor x = random_tensor({3, 6}, rng);
    Tensor gain = random_tensor({6}, rng);
    Tensor bias = random_tensor({6}, rng);
    Tensor w = random_tensor({3, 6}, rng, 1.0, false);
    auto loss = [&]() { return sum(mul(layer_norm(x, gain, bias), w)).value(); };
    GradientMap grads = backward(sum(mul(layer_norm(x, gain, bias), w)));
    CHECK(max_rel_error(grads.at(x).values(), finite_diff(x, loss)) < 1e-4);
    CHECK(max_rel_error(grads.at(gain).values(), finite_diff(gain, loss)) < 1e-4);
    CHECK(max_rel_error(grads.at(bias).values(), finite_diff(bias, loss)) < 1e-4);
}

TEST_CASE("unary values") {
    CHECK(sigmoid(Tensor::scalar(0.0)).value() == doctest::Approx(0.5));
    CHECK(relu(Tensor::scalar(-3.0)).value() == 0.0);
    CHECK(gelu(Tensor::scalar(0.0)).value() == 0.0);
    CHECK_THROWS_WITH_AS(log(Tensor::from({3}, {1.0, -2.0, 3.0})),
                         doctest::Contains("index 1"), DomainError);
}

TEST_CASE("sigmoid gradient at zero is one quarter") {
    Tensor x = Tensor::from({1}, {0.0}, true);
    GradientMap grads = backward(sum(sigmoid(x)));
    CHECK(grads.at(x).values()[0] == doctest::Approx(0.25).epsilon(1e-12));
    auto loss = [&]() { return sum(sigmoid(x)).value(); };
    CHECK(max_rel_error(grads.at(x).values(), finite_diff(x, loss)) < 1e-6);
}

TEST_CASE("unary gradients match finite differences") {
    Rng rng(9);
    for (UnaryKind kind : {UnaryKind::Sigmoid, UnaryKind::Exp, UnaryKind::Gelu, UnaryKind::Relu,
                           UnaryKind::Abs}) {
        Tensor x = random_tensor({2, 5}, rng);
        auto loss = [&]() { return sum(unary(kind, x)).value(); };
        GradientMap grads = backward(sum(unary(kind, x)));
        CHECK(max_rel_error(grads.at(x).values(), finite_diff(x, loss)) < 1e-4);
    }
    for (UnaryKind kind : {UnaryKind::Log, UnaryKind::Sqrt, UnaryKind::Reciprocal}) {
        Tensor x = Tensor::from({4}, {0.5, 1.25, 2.0, 3.75}, true);
        auto loss = [&]() { return sum(unary(kind, x)).value(); };
        GradientMap grads = backward(sum(unary(kind, x)));
        CHECK(max_rel_error(grads.at(x).values(), finite_diff(x, loss)) < 1e-4);
    }
}

TEST_CASE("clamp passes gradient only inside the bounds") {
    Tensor x = Tensor::from({3}, {-2.0, 0.5, 2.0}, true);
    GradientMap grads = backward(sum(clamp(x, 0.0, 1.0)));
    const auto& g = grads.at(x).values();
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 1.0);
    CHECK(g[2] == 0.0);
}

TEST_CASE("detach blocks gradients exactly") {
    Tensor x = Tensor::from({3}, {1.0, -2.0, 3.0}, true);

    Tensor d = detach(x);
    CHECK(d.values() == x.values());
    CHECK_FALSE(d.requires_grad());
    CHECK(d.is_leaf());

    // single-path product: d(loss)/dx equals detach(x) values
    GradientMap grads = backward(sum(mul(detach(x), x)));
    CHECK(grads.at(x).values() == x.values());

    // fully blocked path: x absent from the map
    GradientMap blocked = backward(sum(detach(x)));
    CHECK_FALSE(blocked.contains(x));
    CHECK(blocked.size() == 0);
}

TEST_CASE("backward basics and fan-out accumulation") {
    Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
    GradientMap grads = backward(sum(x));
    for (double g : grads.at(x).values()) CHECK(g == 1.0);

    Tensor y = Tensor::from({2}, {1, 2}, true);
    GradientMap grads2 = backward(sum(mul(y, y)));
    CHECK(grads2.at(y).values()[0] == 2.0);
    CHECK(grads2.at(y).values()[1] == 4.0);

    GradientMap fanout = backward(add(sum(x), sum(x)));
    for (double g : fanout.at(x).values()) CHECK(g == 2.0);

    CHECK_THROWS_AS(backward(x), ContractError);
}

TEST_CASE("backward leaves gradient buffers on leaves") {
    Tensor x = Tensor::from({2}, {3, 5}, true);
    CHECK(x.grad() == nullptr);
    backward(sum(mul(x, x)));
    REQUIRE(x.grad() != nullptr);
    CHECK((*x.grad())[0] == 6.0);
    CHECK((*x.grad())[1] == 10.0);
}

TEST_CASE("depthwise_conv2d identity and hand-traced values") {
    Rng rng(10);
    Tensor x = random_tensor({2, 4, 4}, rng, 1.0, false);
    Tensor delta = Tensor::zeros({2, 3, 3});
    delta.mutable_values()[0 * 9 + 4] = 1.0;
    delta.mutable_values()[1 * 9 + 4] = 1.0;
    Tensor same = depthwise_conv2d(x, delta);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        CHECK(same.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-15));
    }

    // all-ones kernel over all-ones 3x3 input: zero padding makes the center 9
    // and the corners 4
    Tensor ones_in = Tensor::full({1, 3, 3}, 1.0);
    Tensor ones_k = Tensor::full({1, 3, 3}, 1.0);
    Tensor out = depthwise_conv2d(ones_in, ones_k);
    CHECK(out.values()[4] == 9.0);
    CHECK(out.values()[0] == 4.0);
    CHECK(out.values()[2] == 4.0);
    CHECK(out.values()[6] == 4.0);
    CHECK(out.values()[8] == 4.0);
    CHECK(out.values()[1] == 6.0);

    CHECK_THROWS_AS(depthwise_conv2d(x, Tensor::zeros({2, 2, 2})), ContractError);
}

TEST_CASE("depthwise_conv2d gradients match finite differences") {
    Rng rng(12);
    Tensor x = random_tensor({2, 5, 5}, rng);
    Tensor k = random_tensor({2, 3, 3}, rng);
    Tensor w = random_tensor({2, 5, 5}, rng, 1.0, false);
    auto loss = [&]() { return sum(mul(depthwise_conv2d(x, k), w)).value(); };
    GradientMap grads = backward(sum(mul(depthwise_conv2d(x, k), w)));
    CHECK(max_rel_error(grads.at(x).values(), finite_diff(x, loss)) < 1e-5);
    CHECK(max_rel_error(grads.at(k).values(), finite_diff(k, loss)) < 1e-5);
}

TEST_CASE("structural op gradients match finite differences") {
    Rng rng(13);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({2, 4}, rng);
    Tensor w = random_tensor({5, 4}, rng, 1.0, false);
    auto loss_concat = [&]() { return sum(mul(concat(a, b, 0), w)).value(); };
    GradientMap g1 = backward(sum(mul(concat(a, b, 0), w)));
    CHECK(max_rel_error(g1.at(a).values(), finite_diff(a, loss_concat)) < 1e-5);
    CHECK(max_rel_error(g1.at(b).values(), finite_diff(b, loss_concat)) < 1e-5);

    Tensor ws = random_tensor({3, 2}, rng, 1.0, false);
    auto loss_slice = [&]() { return sum(mul(slice(a, 1, 1, 2), ws)).value(); };
    GradientMap g2 = backward(sum(mul(slice(a, 1, 1, 2), ws)));
    CHECK(max_rel_error(g2.at(a).values(), finite_diff(a, loss_slice), 1e-9) < 1e-5);

    Tensor row = random_tensor({4}, rng);
    Tensor wr = random_tensor({3, 4}, rng, 1.0, false);
    auto loss_row = [&]() { return sum(mul(add_row_broadcast(a, row), wr)).value(); };
    GradientMap g3 = backward(sum(mul(add_row_broadcast(a, row), wr)));
    CHECK(max_rel_error(g3.at(row).values(), finite_diff(row, loss_row)) < 1e-5);

    Tensor wt = random_tensor({4, 3}, rng, 1.0, false);
    auto loss_t = [&]() { return sum(mul(transpose(a), wt)).value(); };
    GradientMap g4 = backward(sum(mul(transpose(a), wt)));
    CHECK(max_rel_error(g4.at(a).values(), finite_diff(a, loss_t)) < 1e-5);

    Tensor s = random_tensor({1}, rng);
    auto loss_s = [&]() { return sum(scalar_mul(a, reciprocal(s))).value(); };
    GradientMap g5 = backward(sum(scalar_mul(a, reciprocal(s))));
    CHECK(max_rel_error(g5.at(s).values(), finite_diff(s, loss_s)) < 1e-4);
    CHECK(max_rel_error(g5.at(a).values(), finite_diff(a, loss_s)) < 1e-4);
}

TEST_CASE("reduce_max routes gradient to the first argmax") {
    Tensor x = Tensor::from({4}, {1.0, 7.0, 7.0, 2.0}, true);
    GradientMap grads = backward(reduce_max(x));
    const auto& g = grads.at(x).values();
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 1.0);
    CHECK(g[2] == 0.0);
    CHECK(g[3] == 0.0);
}

TEST_CASE("parameters reachable only through detach stay out of the map") {
    Rng rng(14);
    Tensor w = random_tensor({3, 3}, rng);
    Tensor x = random_tensor({3, 3}, rng);
    Tensor loss = sum(add(mul(x, x), detach(matmul(x, w))));
    GradientMap grads = backward(loss);
    CHECK(grads.contains(x));
    CHECK_FALSE(grads.contains(w));
}

TEST_CASE("forward and backward are bitwise deterministic") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Tensor x = random_tensor({4, 4}, rng);
        Tensor y = softmax(matmul(x, transpose(x)), 1);
        Tensor loss = sum(mul(y, y));
        GradientMap grads = backward(loss);
        return std::make_pair(loss.value(), grads.at(x).values());
    };
    auto [l1, g1] = run(99);
    auto [l2, g2] = run(99);
    CHECK(l1 == l2);
    CHECK(g1 == g2);
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0}), ShapeError);
    CHECK_THROWS_AS(Tensor::zeros({0, 3}), ShapeError);
    Tensor t = Tensor::zeros({2, 3});
    CHECK(t.numel() == 6);
}
