// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mural/fusion.hpp"
#include "mural/oracle.hpp"
#include "support.hpp"

using namespace mural;

namespace {

LatentImage random_latent(int h, int w, int c, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(h) * w * c);
    for (double& x : v) x = rng.normal();
    return LatentImage(h, w, c, v);
}

ConditionSet blank_condition(int h, int w) {
    ConditionSet c;
    c.contour = ContourMask(h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0));
    return c;
}

DiffuserConfig tiny_diffuser(int channels = 3) {
    DiffuserConfig c;
    c.image_channels = channels;
    c.channels = 4;
    c.time_embed_dim = 8;
    return c;
}

void randomize_head(DynamicDiffuser& d, std::uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    for (const char* n : {"head.w", "head.b"})
        for (double& v : d.params().at(n).value.data) v = scale * rng.uniform(-1, 1);
}

}  // namespace

TEST(Influence, NormalizeClosedForms) {
    const auto eq = normalize_influence(stack_maps({{0.7}, {0.7}, {0.7}}, 1, 1));
    for (int n = 0; n < 3; ++n) EXPECT_NEAR(eq.at(n, 0, 0), 1.0 / 3.0, 1e-16);
    const auto two = normalize_influence(stack_maps({{std::log(2.0)}, {0.0}}, 1, 1));
    EXPECT_NEAR(two.at(0, 0, 0), 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(two.at(1, 0, 0), 1.0 / 3.0, 1e-15);
}

TEST(Influence, ShiftInvariantAndOverflowSafe) {
    Rng rng(1);
    std::vector<std::vector<double>> raw(3, std::vector<double>(6)), shifted = raw;
    for (auto& m : raw)
        for (double& v : m) v = rng.uniform(-3, 3);
    for (int p = 0; p < 6; ++p) {
        const double c = rng.uniform(-500, 800);
        for (int n = 0; n < 3; ++n) shifted[n][p] = raw[n][p] + c;
    }
    const auto a = normalize_influence(stack_maps(raw, 2, 3));
    const auto b = normalize_influence(stack_maps(shifted, 2, 3));
    for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-12);
    for (double v : b.values) EXPECT_GT(v, 0.0);
    EXPECT_THROW(normalize_influence(stack_maps({{NAN}, {0.0}}, 1, 1)), NonFiniteError);
}

TEST(Influence, SumsToOneOnRandomPixels) {
    Rng rng(2);
    const int N = 3, P = 100000;
    std::vector<std::vector<double>> raw(N, std::vector<double>(P));
    for (auto& m : raw)
        for (double& v : m) v = rng.uniform(-30, 30);
    const auto w = normalize_influence(stack_maps(raw, 100, 1000));
    for (int p = 0; p < P; ++p) {
        const double s = w.values[p] + w.values[P + p] + w.values[2 * P + p];
        ASSERT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Fuse, FixedPointsAndVertices) {
    Rng rng(3);
    const auto a = random_latent(3, 4, 3, rng), b = random_latent(3, 4, 3, rng);
    const auto w = normalize_influence(stack_maps({std::vector<double>(12, 0.3), std::vector<double>(12, -1.0),
                                                   std::vector<double>(12, 2.0)},
                                                  3, 4));
    const auto same = fuse_eps(w, {a, a, a});
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(same.data()[i], a.data()[i], 1e-15);

    InfluenceStack vertex(2, 3, 4);
    std::fill(vertex.values.begin(), vertex.values.begin() + 12, 1.0);
    const auto first = fuse_eps(vertex, {a, b});
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(first.data()[i], a.data()[i]);
}

TEST(Fuse, ConvexBound) {
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        const int N = 1 + trial % 4;
        std::vector<LatentImage> preds;
        std::vector<std::vector<double>> raw(N, std::vector<double>(8));
        for (int n = 0; n < N; ++n) {
            preds.push_back(random_latent(2, 4, 3, rng));
            for (double& v : raw[n]) v = rng.uniform(-5, 5);
        }
        const auto f = fuse_eps(normalize_influence(stack_maps(raw, 2, 4)), preds);
        for (std::size_t i = 0; i < f.size(); ++i) {
            double lo = 1e300, hi = -1e300;
            for (const auto& p : preds) lo = std::min(lo, p.data()[i]), hi = std::max(hi, p.data()[i]);
            EXPECT_GE(f.data()[i], lo - 1e-12);
            EXPECT_LE(f.data()[i], hi + 1e-12);
        }
    }
}

TEST(Fuse, RejectsUnnormalizedWeights) {
    Rng rng(5);
    const auto a = random_latent(1, 2, 1, rng);
    InfluenceStack w(2, 1, 2);
    w.values = {0.5, 0.5, 0.5, 0.5001};
    EXPECT_THROW(fuse_eps(w, {a, a}), DomainError);
    EXPECT_THROW(fuse_eps(uniform_influence(3, 1, 2), {a, a}), ShapeError);
}

TEST(Diffuser, ZeroHeadGivesZeroMap) {
    const DynamicDiffuser d(tiny_diffuser(), 8, 8, 1);
    Rng rng(6);
    for (double v : influence(d, random_latent(8, 8, 3, rng), 10, blank_condition(8, 8))) EXPECT_EQ(v, 0.0);
}

TEST(Diffuser, DeterministicMap) {
    DynamicDiffuser a(tiny_diffuser(), 8, 8, 7), b(tiny_diffuser(), 8, 8, 7);
    randomize_head(a, 8);
    randomize_head(b, 8);
    Rng rng(9);
    const auto x = random_latent(8, 8, 3, rng);
    EXPECT_EQ(influence(a, x, 3, blank_condition(8, 8)), influence(b, x, 3, blank_condition(8, 8)));
    EXPECT_THROW(influence(a, random_latent(4, 4, 3, rng), 3, blank_condition(4, 4)), ShapeError);
}

TEST(Diffuser, GradientsMatchFiniteDifferences) {
    std::vector<DynamicDiffuser> ds;
    for (int n = 0; n < 2; ++n) {
        ds.emplace_back(tiny_diffuser(), 8, 8, 10 + n);
        randomize_head(ds.back(), 20 + n, 2.0);
    }
    Rng rng(11);
    const auto x = random_latent(8, 8, 3, rng), target = random_latent(8, 8, 3, rng);
    const std::vector<nn::Tensor> preds = {detail::to_chw(random_latent(8, 8, 3, rng)),
                                           detail::to_chw(random_latent(8, 8, 3, rng))};
    const auto cond = blank_condition(8, 8);
    for (int checked = 0; checked < 2; ++checked) {
        const auto results = mural::testing::check_gradients(ds[checked].params(), [&](nn::Binder& p) {
            nn::Tape& tape = p.tape();
            nn::Binder other(tape, ds[1 - checked].params(), false);
            const nn::Var xt = tape.constant(detail::to_chw(x));
            std::vector<nn::Var> raw(2);
            raw[checked] = ds[checked].forward(p, xt, 7, cond);
            raw[1 - checked] = ds[1 - checked].forward(other, xt, 7, cond);
            const nn::Var fused = nn::weighted_fuse(tape, nn::softmax_channels(tape, nn::concat(tape, raw)), preds);
            return nn::mse(tape, fused, detail::to_chw(target));
        });
        for (const auto& g : results) EXPECT_LT(g.max_rel_error, 1e-4) << checked << " " << g.name;
    }
}

TEST(Sampling, SingleScaleMatchesPlainChain) {
    const auto s = make_scaled_schedule(30);
    const GaussianSpec g{LatentImage(4, 4, 3), 0.4};
    const OraclePredictor oracle(MixtureSpec{{{1.0, g}}}, s);
    Collaborators co;
    co.predictors = {&oracle};
    SampleRequest req;
    req.conditions = {blank_condition(4, 4)};
    SampleOptions opt;
    opt.seed = 12;
    const auto a = collaborative_chain(co, req, s, opt);
    Rng rng(12);
    const auto b = reverse_chain(Shape{4, 4, 3}, s, rng,
                                 [&](const LatentImage& xt, int t) { return oracle_eps_gaussian(xt, t, s, g); });
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Sampling, EqualLogitsMatchUniformFusion) {
    const auto s = make_schedule(20, 1e-3, 0.3);
    Rng rng(13);
    const GaussianSpec g1{random_latent(4, 4, 3, rng), 0.3}, g2{random_latent(2, 2, 3, rng), 0.5};
    const OraclePredictor p1(MixtureSpec{{{1.0, g1}}}, s), p2(MixtureSpec{{{1.0, g2}}}, s);
    const DynamicDiffuser d1(tiny_diffuser(), 4, 4, 1), d2(tiny_diffuser(), 4, 4, 2);
    Collaborators uniform, learned;
    uniform.predictors = learned.predictors = {&p1, &p2};
    learned.diffusers = {&d1, &d2};
    SampleRequest req;
    req.conditions = {blank_condition(4, 4), blank_condition(2, 2)};
    req.canonical_condition = blank_condition(4, 4);
    SampleOptions opt;
    opt.seed = 14;
    const auto a = collaborative_chain(uniform, req, s, opt), b = collaborative_chain(learned, req, s, opt);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(Sampling, IdenticalCollaboratorsAreIdempotent) {
    const auto s = make_schedule(20, 1e-3, 0.3);
    const GaussianSpec g{LatentImage(4, 4, 3), 0.4};
    const OraclePredictor oracle(MixtureSpec{{{1.0, g}}}, s);
    DynamicDiffuser d1(tiny_diffuser(), 4, 4, 1), d2(tiny_diffuser(), 4, 4, 2), d3(tiny_diffuser(), 4, 4, 3);
    randomize_head(d1, 1);
    randomize_head(d2, 2);
    randomize_head(d3, 3);
    Collaborators one, three;
    one.predictors = {&oracle};
    three.predictors = {&oracle, &oracle, &oracle};
    three.diffusers = {&d1, &d2, &d3};
    SampleRequest r1, r3;
    r1.conditions = {blank_condition(4, 4)};
    r3.conditions = {blank_condition(4, 4), blank_condition(4, 4), blank_condition(4, 4)};
    r3.canonical_condition = blank_condition(4, 4);
    SampleOptions opt;
    opt.seed = 15;
    const auto a = collaborative_chain(one, r1, s, opt), b = collaborative_chain(three, r3, s, opt);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(Sampling, OracleCollaboratorsReproduceMoments) {
    const auto s = make_scaled_schedule(100);
    const GaussianSpec g{LatentImage(2, 2, 1, {0.5, -0.5, 0.25, 0.0}), 0.2};
    const OraclePredictor oracle(MixtureSpec{{{1.0, g}}}, s);
    DynamicDiffuser d1(tiny_diffuser(1), 2, 2, 1), d2(tiny_diffuser(1), 2, 2, 2);
    randomize_head(d1, 4);
    randomize_head(d2, 5);
    Collaborators co;
    co.predictors = {&oracle, &oracle};
    co.diffusers = {&d1, &d2};
    SampleRequest req;
    req.conditions = {blank_condition(2, 2), blank_condition(2, 2)};
    req.canonical_condition = blank_condition(2, 2);
    req.known = LatentImage(2, 2, 1);  // only fixes the channel count
    const int n = 2000;
    std::vector<double> sum(4, 0), sq(4, 0);
    for (int i = 0; i < n; ++i) {
        SampleOptions opt;
        opt.seed = derive_seed(16, stage::sample, static_cast<std::uint64_t>(i));
        const auto x = collaborative_chain(co, req, s, opt);
        for (int p = 0; p < 4; ++p) sum[p] += x.data()[p], sq[p] += x.data()[p] * x.data()[p];
    }
    for (int p = 0; p < 4; ++p) {
        const double mean = sum[p] / n, var = sq[p] / n - mean * mean;
        EXPECT_NEAR(mean, g.mean.data()[p], 3 * std::sqrt(g.variance / n));
        EXPECT_NEAR(var, g.variance, 3 * g.variance * std::sqrt(2.0 / (n - 1)));
    }
}

TEST(Sampling, KnownPixelsPreserved) {
    const auto s = make_schedule(10, 1e-3, 0.5);
    const GaussianSpec g{LatentImage(4, 4, 3), 1.0};
    const OraclePredictor oracle(MixtureSpec{{{1.0, g}}}, s);
    Collaborators co;
    co.predictors = {&oracle};
    Rng rng(17);
    std::vector<double> v(48);
    for (double& x : v) x = rng.uniform();
    const Image known(4, 4, 3, v);
    std::vector<std::uint8_t> miss(16, 0);
    for (int i : {5, 6, 9, 10}) miss[i] = 1;
    SampleRequest req;
    req.conditions = {blank_condition(4, 4)};
    req.known = to_latent(known);
    req.missing = ContourMask(4, 4, miss);
    for (bool harmonize : {true, false}) {
        SampleOptions opt;
        opt.seed = 3;
        opt.harmonize = harmonize;
        const Image out = collaborative_sample(co, req, s, opt);
        for (int p = 0; p < 16; ++p)
            for (int c = 0; c < 3; ++c)
                if (!miss[p]) {
                    EXPECT_EQ(out.data()[p * 3 + c], known.data()[p * 3 + c]);
                }
    }
}

TEST(Training, FrozenPredictorsAndZeroSteps) {
    const auto s = make_schedule(20, 1e-3, 0.3);
    Rng rng(18);
    const GaussianSpec g{LatentImage(4, 4, 3), 0.5};
    DenoiserConfig dc;
    dc.base_channels = 4;
    dc.depth = 1;
    dc.heads = 1;
    dc.time_embed_dim = 4;
    const Denoiser pa(dc, 4, 4, 1), pb(dc, 2, 2, 2);
    const auto before_a = pa.params(), before_b = pb.params();
    DynamicDiffuser d1(tiny_diffuser(), 4, 4, 3), d2(tiny_diffuser(), 4, 4, 4);
    const auto d1_before = d1.params();
    std::vector<FusionSample> data;
    for (int i = 0; i < 4; ++i)
        data.push_back({sample_gaussian(g, rng), {blank_condition(4, 4), blank_condition(2, 2)}, blank_condition(4, 4)});
    DiffuserTrainOptions opt;
    opt.steps = 0;
    EXPECT_TRUE(train_diffusers({&d1, &d2}, {&pa, &pb}, data, s, opt).empty());
    EXPECT_TRUE(d1.params() == d1_before);
    opt.steps = 3;
    train_diffusers({&d1, &d2}, {&pa, &pb}, data, s, opt);
    EXPECT_FALSE(d1.params() == d1_before);
    EXPECT_TRUE(pa.params() == before_a);
    EXPECT_TRUE(pb.params() == before_b);
}

TEST(Training, LearnsToFavourTheBetterPredictor) {
    const auto s = make_scaled_schedule(50);
    const GaussianSpec g{LatentImage(8, 8, 1), 0.25};
    const mural::testing::NoisyOracle good(g, s, 0.05, 1), bad(g, s, 0.5, 2);
    DynamicDiffuser d_good(tiny_diffuser(1), 8, 8, 3), d_bad(tiny_diffuser(1), 8, 8, 4);
    Rng rng(19);
    auto make = [&](int n) {
        std::vector<FusionSample> v;
        for (int i = 0; i < n; ++i)
            v.push_back({sample_gaussian(g, rng), {blank_condition(8, 8), blank_condition(8, 8)}, blank_condition(8, 8)});
        return v;
    };
    const auto train = make(32), held_out = make(32);
    DiffuserTrainOptions opt;
    opt.steps = 150;
    opt.adam.lr = 1e-2;
    opt.seed = 20;
    train_diffusers({&d_good, &d_bad}, {&good, &bad}, train, s, opt);

    Collaborators co, uniform;
    co.predictors = uniform.predictors = {&good, &bad};
    co.diffusers = {&d_good, &d_bad};
    double mean_weight = 0;
    for (const auto& sample : held_out) {
        const auto w = fused_weights(co, forward_diffuse(sample.x0, 25, random_latent(8, 8, 1, rng), s), 25,
                                     sample.canonical_cond);
        mean_weight += std::accumulate(w.values.begin(), w.values.begin() + 64, 0.0) / 64;
    }
    mean_weight /= held_out.size();
    EXPECT_GT(mean_weight, 0.5);
    EXPECT_LE(fusion_loss(co, held_out, s, 21), fusion_loss(uniform, held_out, s, 21));
}
