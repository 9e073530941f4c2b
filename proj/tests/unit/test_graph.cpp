#include <gtest/gtest.h>

#include <cmath>

#include "lnfree/graph.hpp"

using namespace lnfree;

namespace {

Tensor<double> randt(Shape shape, Rng& rng, double stddev = 1.0) {
    return Tensor<double>::randn(std::move(shape), rng, stddev);
}

}  // namespace

TEST(Gelu, FixedPoints) {
    auto x = constant(Tensor<double>({3}, {0.0, 10.0, 1.0}));
    auto y = gelu(x);
    EXPECT_DOUBLE_EQ(y->value[0], 0.0);
    EXPECT_NEAR(y->value[1], 10.0, 1e-6);
    // High-precision scalar evaluation of the tanh form, frozen before the build.
    EXPECT_NEAR(y->value[2], 0.84119199060827665, 1e-15);
}

TEST(Gelu, RangeEnvelopeOnGrid) {
    for (int i = 0; i <= 600; ++i) {
        const double x = -3.0 + i * 0.01;
        auto y = gelu(constant(Tensor<double>({1}, {x})));
        const double g = y->value[0];
        EXPECT_GE(g, -0.2);
        EXPECT_LE(g, std::max(0.0, x) + 1e-12);
        if (x <= 0.0) EXPECT_LE(g, 1e-12);
    }
}

TEST(Softmax, Symmetry) {
    auto y = softmax_last(constant(Tensor<double>({2}, {0.0, 0.0})));
    EXPECT_DOUBLE_EQ(y->value[0], 0.5);
    EXPECT_DOUBLE_EQ(y->value[1], 0.5);
}

TEST(Softmax, AnalyticTwoThirds) {
    auto y = softmax_last(constant(Tensor<double>({2}, {std::log(2.0), 0.0})));
    EXPECT_NEAR(y->value[0], 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(y->value[1], 1.0 / 3.0, 1e-12);
}

TEST(Softmax, ShiftInvarianceAndRowSums) {
    Rng rng(11);
    for (int rep = 0; rep < 20; ++rep) {
        auto x = randt({3, 7}, rng, 3.0);
        auto shifted = x;
        for (auto& v : shifted.data) v += 1000.0;
        auto a = softmax_last(constant(x));
        auto b = softmax_last(constant(shifted));
        for (int64_t i = 0; i < a->numel(); ++i) {
            EXPECT_NEAR(a->value[i], b->value[i], 1e-6);
            EXPECT_GE(a->value[i], 0.0);
            EXPECT_LE(a->value[i], 1.0);
        }
        for (int64_t r = 0; r < 3; ++r) {
            double sum = 0.0;
            for (int64_t c = 0; c < 7; ++c) sum += a->value[r * 7 + c];
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
    }
}

TEST(Gradient, SumOfSquares) {
    auto x = parameter(Tensor<double>({3}, {1.0, 2.0, 3.0}));
    Graph<double> g(sum_all(mul(x, x)));
    g.backward();
    EXPECT_DOUBLE_EQ(x->grad[0], 2.0);
    EXPECT_DOUBLE_EQ(x->grad[1], 4.0);
    EXPECT_DOUBLE_EQ(x->grad[2], 6.0);
}

TEST(Gradient, ConstantOutputGivesZeroGrads) {
    auto x = parameter(Tensor<double>({2}, {1.0, -1.0}));
    auto c = constant(Tensor<double>({1}, {5.0}));
    Graph<double> g(c);
    g.backward();
    EXPECT_DOUBLE_EQ(x->grad[0], 0.0);
    EXPECT_DOUBLE_EQ(x->grad[1], 0.0);
}

TEST(Gradient, NonScalarOutputIsContractViolation) {
    auto x = parameter(Tensor<double>({2}, {1.0, 2.0}));
    Graph<double> g(mul(x, x));
    EXPECT_THROW(g.backward(), ProtocolError);
}

TEST(Gradient, DiamondGraphVisitedOnce) {
    // y = x*x + x*x: the shared node must be traversed exactly once and the
    // gradient must still combine both uses.
    auto x = parameter(Tensor<double>({1}, {3.0}));
    auto sq = mul(x, x);
    Graph<double> g(sum_all(add(sq, sq)));
    g.backward();
    EXPECT_DOUBLE_EQ(x->grad[0], 12.0);
    for (auto* node : g.topo()) EXPECT_EQ(node->backward_visits, 1);
}

TEST(Gradient, BackwardTwiceThrows) {
    auto x = parameter(Tensor<double>({1}, {2.0}));
    Graph<double> g(sum_all(mul(x, x)));
    g.backward();
    EXPECT_THROW(g.backward(), ProtocolError);
}

TEST(FiniteDiff, QuadraticIsExactUpToRoundoff) {
    auto x = parameter(Tensor<double>({4}, {0.5, -1.5, 2.0, 0.25}));
    Graph<double> g(sum_all(mul(x, x)));
    EXPECT_LT(finite_diff_check(g, x, 1e-5), 1e-7);
}

TEST(FiniteDiff, ZeroParamOnSymmetricLoss) {
    auto x = parameter(Tensor<double>({3}, {0.0, 0.0, 0.0}));
    Graph<double> g(sum_all(mul(x, x)));
    EXPECT_DOUBLE_EQ(finite_diff_check(g, x, 1e-5), 0.0);
}

// Every primitive's backward against central finite differences on random
// inputs (randomized property demanded of the whole op set).
TEST(FiniteDiff, AllPrimitivesUnderRandomInputs) {
    Rng rng(42);
    const double tol = 1e-6;

    {  // add / sub / mul with suffix broadcast
        auto a = parameter(randt({2, 3, 4}, rng));
        auto b = parameter(randt({4}, rng));
        auto w = randt({2, 3, 4}, rng);
        Graph<double> g(inner(mul(sub(add(a, b), b), a), w));
        EXPECT_LT(finite_diff_check(g, a, 1e-6), tol);
        EXPECT_LT(finite_diff_check(g, b, 1e-6), tol);
    }
    {  // scale / add_scalar / gelu
        auto a = parameter(randt({5}, rng));
        Graph<double> g(sum_all(gelu(add_scalar(scale(a, 1.7), 0.3))));
        EXPECT_LT(finite_diff_check(g, a, 1e-6), tol);
    }
    {  // matmul with shared and batched operands
        auto a = parameter(randt({2, 3, 4}, rng));
        auto w = parameter(randt({4, 5}, rng));
        auto b = parameter(randt({2, 5, 3}, rng));
        auto readout = randt({2, 3, 3}, rng);
        Graph<double> g(inner(matmul(matmul(a, w), b), readout));
        EXPECT_LT(finite_diff_check(g, a, 1e-6), tol);
        EXPECT_LT(finite_diff_check(g, w, 1e-6), tol);
        EXPECT_LT(finite_diff_check(g, b, 1e-6), tol);
    }
    {  // matmul_nt both forms
        auto a = parameter(randt({2, 3, 4}, rng));
        auto b = parameter(randt({2, 6, 4}, rng));
        auto w = parameter(randt({5, 6}, rng));
        auto readout = randt({2, 3, 5}, rng);
        Graph<double> g(inner(matmul_nt(matmul_nt(a, b), w), readout));
        EXPECT_LT(finite_diff_check(g, a, 1e-6), tol);
        EXPECT_LT(finite_diff_check(g, b, 1e-6), tol);
        EXPECT_LT(finite_diff_check(g, w, 1e-6), tol);
    }
    {  // softmax variants
        auto a = parameter(randt({2, 4, 4}, rng));
        auto readout = randt({2, 4, 4}, rng);
        Graph<double> g1(inner(softmax_last(a), readout));
        EXPECT_LT(finite_diff_check(g1, a, 1e-6), tol);
        auto b = parameter(randt({2, 4, 4}, rng));
        Graph<double> g2(inner(causal_softmax(b), readout));
        EXPECT_LT(finite_diff_check(g2, b, 1e-6), tol);
    }
    {  // layer_norm / fake_ln / sigma
        auto x = parameter(randt({3, 6}, rng));
        auto gamma = parameter(randt({6}, rng, 0.2));
        auto beta = parameter(randt({6}, rng, 0.2));
        auto readout = randt({3, 6}, rng);
        Graph<double> g1(inner(layer_norm(x, gamma, beta, 1e-5), readout));
        EXPECT_LT(finite_diff_check(g1, x, 1e-6), tol);
        EXPECT_LT(finite_diff_check(g1, gamma, 1e-6), tol);
        EXPECT_LT(finite_diff_check(g1, beta, 1e-6), tol);

        auto x2 = parameter(randt({3, 6}, rng));
        Graph<double> g2(inner(fake_ln(x2, gamma, beta, 1.3), readout));
        EXPECT_LT(finite_diff_check(g2, x2, 1e-6), tol);

        auto x3 = parameter(randt({4, 6}, rng));
        auto sreadout = randt({4}, rng);
        Graph<double> g3(inner(sigma(x3, 1e-5), sreadout));
        EXPECT_LT(finite_diff_check(g3, x3, 1e-6), tol);
    }
    {  // embedding + first_rows + cross_entropy
        TensorI ids({2, 3}, {0, 2, 4, 1, 3, 0});
        TensorI tgt({2, 3}, {1, 0, 3, 2, 4, 1});
        auto table = parameter(randt({5, 4}, rng));
        auto pos = parameter(randt({8, 4}, rng));
        auto h = add(embedding(table, ids), first_rows(pos, 3));
        auto logits = matmul_nt(h, table);
        Graph<double> g(cross_entropy(logits, tgt));
        EXPECT_LT(finite_diff_check(g, table, 1e-6), tol);
        EXPECT_LT(finite_diff_check(g, pos, 1e-6), tol);
    }
    {  // split/merge heads round trip
        auto x = parameter(randt({2, 3, 8}, rng));
        auto readout = randt({2, 3, 8}, rng);
        Graph<double> g(inner(merge_heads(split_heads(x, 2)), readout));
        EXPECT_LT(finite_diff_check(g, x, 1e-6), tol);
    }
    {  // intervention ops block gradient at replaced entries
        auto x = parameter(randt({2, 3, 4}, rng));
        auto readout = randt({2, 3, 4}, rng);
        Graph<double> g1(inner(overwrite_position(x, 1, randt({2, 4}, rng)), readout));
        EXPECT_LT(finite_diff_check(g1, x, 1e-6), tol);
        auto y = parameter(randt({2, 3, 4}, rng));
        Graph<double> g2(inner(clamp_features(y, {{2, 0.7}}), readout));
        EXPECT_LT(finite_diff_check(g2, y, 1e-6), tol);
    }
}

TEST(Ops, EmbeddingRejectsOutOfRangeIds) {
    Rng rng(1);
    auto table = parameter(randt({4, 2}, rng));
    TensorI bad({1, 2}, {0, 7});
    EXPECT_THROW(embedding(table, bad), InputError);
}

TEST(Ops, CausalSoftmaxMasksStrictlyUpperTriangle) {
    Rng rng(3);
    auto y = causal_softmax(parameter(randt({1, 4, 4}, rng)));
    for (int64_t q = 0; q < 4; ++q) {
        double sum = 0.0;
        for (int64_t t = 0; t < 4; ++t) {
            if (t > q) EXPECT_DOUBLE_EQ(y->value[q * 4 + t], 0.0);
            sum += y->value[q * 4 + t];
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Ops, RecomputeRestoresValuesAfterFiniteDiff) {
    Rng rng(5);
    auto x = parameter(randt({3}, rng));
    const std::vector<double> before = x->value.data;
    Graph<double> g(sum_all(gelu(x)));
    const double out_before = g.output()->value[0];
    finite_diff_check(g, x, 1e-6);
    EXPECT_EQ(x->value.data, before);
    EXPECT_DOUBLE_EQ(g.output()->value[0], out_before);
}

TEST(Tensor, ShapeInvariant) {
    EXPECT_THROW(Tensor<double>({2, 2}, {1.0, 2.0, 3.0}), InputError);
    Tensor<double> t({2, 3});
    EXPECT_EQ(t.numel(), 6);
    EXPECT_TRUE(t.all_finite());
    t[0] = std::numeric_limits<double>::infinity();
    EXPECT_FALSE(t.all_finite());
}
