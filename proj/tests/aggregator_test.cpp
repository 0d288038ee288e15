#include <gtest/gtest.h>

#include "pushbroom/aggregator.hpp"
#include "testutil.hpp"

using namespace pushbroom;
using namespace pushbroom::test;

namespace {

std::vector<const Tensor*> ptrs(const std::vector<Tensor>& v) {
    std::vector<const Tensor*> out;
    for (const auto& t : v) out.push_back(&t);
    return out;
}

}  // namespace

TEST(DetectFaults, SingleDenoiserIsAlwaysOk) {
    AggregatorParams p = AggregatorParams::make(4, 3, 1);
    Rng rng(2);
    std::vector<Tensor> feats{rand_uniform(rng, {1, 6, 4})};
    FaultReport rep = detect_faults(ptrs(feats), p);
    EXPECT_EQ(rep.variance[0], 0.0);  // softmax over one element is 1 everywhere
    EXPECT_FALSE(rep.faulty[0]);
    EXPECT_EQ(rep.active, std::vector<int>{0});
}

TEST(DetectFaults, IdenticalFeaturesAllOk) {
    AggregatorParams p = AggregatorParams::make(4, 3, 3);
    Rng rng(4);
    Tensor h = rand_uniform(rng, {1, 8, 4});
    std::vector<Tensor> feats{h, h, h};
    FaultReport rep = detect_faults(ptrs(feats), p);
    for (int d = 0; d < 3; ++d) {
        EXPECT_FALSE(rep.faulty[(size_t)d]);
        EXPECT_LT(rep.variance[(size_t)d], 1e-20);
    }
    EXPECT_EQ(rep.active.size(), 3u);
}

TEST(DetectFaults, SpatiallyInconsistentFeaturesAreFlagged) {
    // F = 1 with identity projections: scores are raw feature products.
    // denoiser 1 alternates 0 / 10 across the line, so its diagonal
    // attention flips between 0.5 and ~1.0: variance far above tau.
    AggregatorParams p = AggregatorParams::make(1, 2, 5);
    p.w_k.w = Tensor({1, 1}, {1.0});
    p.w_q.w = Tensor({1, 1}, {1.0});
    int N = 16;
    Tensor h0({1, N, 1});
    Tensor h1({1, N, 1});
    for (int n = 0; n < N; ++n) h1.at(0, n, 0) = n % 2 ? 10.0 : 0.0;
    std::vector<Tensor> feats{h0, h1};
    FaultReport rep = detect_faults(ptrs(feats), p);
    EXPECT_FALSE(rep.faulty[0]);
    EXPECT_TRUE(rep.faulty[1]);
    EXPECT_GT(rep.variance[1], p.tau);
    EXPECT_EQ(rep.active, std::vector<int>{0});
}

TEST(DetectFaults, NonFiniteShortCircuits) {
    AggregatorParams p = AggregatorParams::make(4, 3, 6);
    Rng rng(7);
    std::vector<Tensor> feats{rand_uniform(rng, {1, 5, 4}), rand_uniform(rng, {1, 5, 4})};
    feats[1].at(0, 2, 1) = std::numeric_limits<double>::quiet_NaN();
    FaultReport rep = detect_faults(ptrs(feats), p);
    EXPECT_TRUE(rep.faulty[1]);
    EXPECT_TRUE(std::isinf(rep.variance[1]));
    EXPECT_EQ(rep.active, std::vector<int>{0});
}

TEST(Aggregate, ZeroOutConvPassesInputThrough) {
    AggregatorParams p = AggregatorParams::make(4, 3, 8);
    p.out_conv.w.fill(0.0);
    p.out_conv.b.fill(0.0);
    Rng rng(9);
    Tensor y = rand_uniform(rng, {1, 6, 3}, 0.0, 1.0);
    std::vector<Tensor> feats{rand_uniform(rng, {1, 6, 4})};
    Tensor xh;
    aggregate_line(y, ptrs(feats), {0}, p, xh);
    EXPECT_TRUE(bitwise_equal(xh, y));
}

TEST(Aggregate, AttentionRowsSumToOne) {
    // identical features make every value row the same vector v*, so the
    // attention output collapses to (row sum) * v*; row sums must be 1
    AggregatorParams p = AggregatorParams::make(3, 2, 10);
    Rng rng(11);
    Tensor h = rand_uniform(rng, {1, 5, 3});
    std::vector<Tensor> feats{h, h, h};

    Graph g;
    VarMap vm = register_params(g, p, false);
    g.recording = false;
    std::vector<Var> fv;
    for (auto& f : feats) fv.push_back(g.constant(f));
    Var z = mixture_attention(g, fv, vm.of(p.w_k.w), vm.of(p.w_q.w), vm.of(p.w_v.w));
    Tensor vstar({1, 5, 3});
    linear_fwd(h, p.w_v.w, nullptr, vstar);
    const Tensor& zt = g.val(z);  // [3 x 1 x 5 x 3]
    for (int d = 0; d < 3; ++d)
        for (int64_t i = 0; i < vstar.numel(); ++i)
            EXPECT_NEAR(zt[(int64_t)d * vstar.numel() + i] - h[i], vstar[i], 1e-12);
}

TEST(Aggregate, IdenticalFeaturesWithZeroValueReduceToSingle) {
    AggregatorParams p = AggregatorParams::make(4, 3, 12);
    p.w_v.w.fill(0.0);
    Rng rng(13);
    Tensor y = rand_uniform(rng, {1, 6, 3}, 0.0, 1.0);
    Tensor h = rand_uniform(rng, {1, 6, 4});
    std::vector<Tensor> many{h, h, h};
    std::vector<Tensor> one{h};
    Tensor xm, xo;
    aggregate_line(y, ptrs(many), {0, 1, 2}, p, xm);
    aggregate_line(y, ptrs(one), {0}, p, xo);
    expect_tensor_near(xm, xo, 1e-12, "degenerate mixture = single head");
}

TEST(Aggregate, ReducedSetIsBitwiseEqualToSmallerMixture) {
    AggregatorParams p = AggregatorParams::make(4, 3, 14);
    Rng rng(15);
    Tensor y = rand_uniform(rng, {1, 7, 3}, 0.0, 1.0);
    std::vector<Tensor> feats{rand_uniform(rng, {1, 7, 4}), rand_uniform(rng, {1, 7, 4}),
                              rand_uniform(rng, {1, 7, 4})};
    Tensor filtered;
    aggregate_line(y, ptrs(feats), {0, 2}, p, filtered);  // denoiser 1 excluded

    std::vector<Tensor> reduced{feats[0], feats[2]};
    Tensor small;
    aggregate_line(y, ptrs(reduced), {0, 1}, p, small);
    EXPECT_TRUE(bitwise_equal(filtered, small));
}

TEST(Aggregate, PermutationLeavesOutputUnchanged) {
    AggregatorParams p = AggregatorParams::make(4, 3, 16);
    Rng rng(17);
    Tensor y = rand_uniform(rng, {1, 6, 3}, 0.0, 1.0);
    std::vector<Tensor> feats{rand_uniform(rng, {1, 6, 4}), rand_uniform(rng, {1, 6, 4}),
                              rand_uniform(rng, {1, 6, 4})};
    std::vector<Tensor> perm{feats[2], feats[0], feats[1]};
    Tensor a, b;
    aggregate_line(y, ptrs(feats), {0, 1, 2}, p, a);
    aggregate_line(y, ptrs(perm), {0, 1, 2}, p, b);
    expect_tensor_near(a, b, 1e-12, "permutation invariance");
}

TEST(Aggregate, AllFaultyIsAnError) {
    AggregatorParams p = AggregatorParams::make(4, 3, 18);
    Rng rng(19);
    Tensor y = rand_uniform(rng, {1, 6, 3}, 0.0, 1.0);
    std::vector<Tensor> feats{rand_uniform(rng, {1, 6, 4})};
    Tensor xh;
    EXPECT_THROW(aggregate_line(y, ptrs(feats), {}, p, xh), std::runtime_error);
}

TEST(Aggregate, MixtureAttentionGradCheck) {
    Rng rng(20);
    int D = 3, L = 2, N = 3, F = 4;
    std::vector<Tensor> params;
    for (int d = 0; d < D; ++d) params.push_back(rand_uniform(rng, {L, N, F}));
    params.push_back(rand_uniform(rng, {F, F}));
    params.push_back(rand_uniform(rng, {F, F}));
    params.push_back(rand_uniform(rng, {F, F}));
    expect_grad_check(params, [&](Graph& g, const std::vector<Var>& v) {
        std::vector<Var> feats{v[0], v[1], v[2]};
        Var z = mixture_attention(g, feats, v[3], v[4], v[5]);
        return mse_loss(g, z, g.constant(Tensor(g.val(z).shape())));
    });
}

TEST(Aggregate, TrainingHeadGradCheck) {
    Rng rng(21);
    AggregatorParams p = AggregatorParams::make(3, 2, 22);
    int L = 2, N = 6;
    std::vector<Tensor> params{rand_uniform(rng, {L, N, 3}), rand_uniform(rng, {L, N, 3}),
                               rand_uniform(rng, {L, N, 2}, 0.0, 1.0)};
    std::vector<Tensor*> slots;
    p.visit_params("", [&](const std::string&, Tensor& t, ParamKind) {
        params.push_back(t);
        slots.push_back(&t);
    });
    expect_grad_check(params, [&](Graph& g, const std::vector<Var>& v) {
        VarMap vm;
        for (size_t i = 0; i < slots.size(); ++i) vm.add(*slots[i], v[i + 3]);
        Var xh = mixture_head(g, vm, p, {v[0], v[1]}, v[2]);
        return mse_loss(g, xh, g.constant(Tensor(g.val(xh).shape())));
    });
}

TEST(Aggregate, ThresholdAuc) {
    EXPECT_DOUBLE_EQ(threshold_auc({5, 6}, {1, 2}), 1.0);
    EXPECT_DOUBLE_EQ(threshold_auc({1e-3}, {1e-3}), 0.5);
    EXPECT_THROW(threshold_auc({}, {1.0}), std::runtime_error);
}
