// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "mural/core/rng.hpp"
#include "mural/diffusion.hpp"

using namespace mural;

namespace {

LatentImage noise_image(int h, int w, int c, Rng& rng) {
    std::vector<double> v(static_cast<std::size_t>(h) * w * c);
    for (double& x : v) x = rng.normal();
    return LatentImage(h, w, c, v);
}

LatentImage constant(int h, int w, int c, double v) { return LatentImage(h, w, c, std::vector<double>(h * w * c, v)); }

}  // namespace

TEST(Schedule, SingleAndTwoStepProducts) {
    EXPECT_DOUBLE_EQ(make_schedule(1, 0.02, 0.02).alpha_bar(1), 0.98);
    const auto s = make_schedule(2, 0.1, 0.2);
    EXPECT_NEAR(s.alpha_bar(2), 0.72, 1e-15);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, DefaultThousandStepsEndsNearZero) {
    const auto s = make_schedule(1000);
    double prod = 1.0;
    for (int i = 0; i < 1000; ++i) prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999.0);
    EXPECT_NEAR(s.alpha_bar(1000), prod, 1e-15);
    EXPECT_NEAR(s.alpha_bar(1000), 4.035829765375676e-05, 1e-12);
}

TEST(Schedule, MonotoneAndPositiveSigma) {
    for (SigmaMode m : {SigmaMode::beta, SigmaMode::posterior})
        for (int T : {1, 2, 7, 50, 200}) {
            const auto s = make_schedule(T, 1e-3, 0.05, m);
            for (int t = 1; t <= T; ++t) {
                EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
                if (t > 1 || m == SigmaMode::beta) {
                    EXPECT_GT(s.sigma(t), 0.0);
                }
            }
        }
}

TEST(Schedule, RejectsBadParameters) {
    EXPECT_THROW(make_schedule(0), DomainError);
    EXPECT_THROW(make_schedule(10, 0.0, 0.02), DomainError);
    EXPECT_THROW(make_schedule(10, 0.03, 0.02), DomainError);
    EXPECT_THROW(make_schedule(10, 1e-4, 1.0), DomainError);
    EXPECT_THROW(make_schedule(10).beta(11), DomainError);
    EXPECT_THROW(parse_sigma_mode("fixed"), ConfigError);
}

TEST(Schedule, RespacePreservesCumulativeProducts) {
    const auto s = make_schedule(100);
    const auto r = respace(s, 10);
    ASSERT_EQ(r.steps(), 10);
    for (int i = 1; i <= 10; ++i) {
        EXPECT_EQ(r.model_timestep(i), 10 * i);
        EXPECT_NEAR(r.alpha_bar(i), s.alpha_bar(10 * i), 1e-14);
    }
    EXPECT_EQ(respace(s, 100).betas(), s.betas());
    EXPECT_THROW(respace(s, 101), DomainError);
}

TEST(Forward, EndpointsAndSubstitution) {
    Rng rng(1);
    const auto s = make_schedule(10);
    const LatentImage x0 = noise_image(3, 3, 2, rng), eps = noise_image(3, 3, 2, rng);
    const auto same = forward_diffuse(x0, 0, eps, s);
    for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_EQ(same.data()[i], x0.data()[i]);

    const NoiseSchedule quarter({0.75});
    const auto y = forward_diffuse(constant(3, 3, 2, 0.0), 1, eps, quarter);
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y.data()[i], std::sqrt(0.75) * eps.data()[i], 1e-15);
}

TEST(Forward, AffineInInputs) {
    Rng rng(2);
    const auto s = make_schedule(20);
    const auto a = noise_image(4, 4, 1, rng), b = noise_image(4, 4, 1, rng);
    const auto e1 = noise_image(4, 4, 1, rng), e2 = noise_image(4, 4, 1, rng);
    auto add = [](const LatentImage& p, const LatentImage& q, double k) {
        std::vector<double> v(p.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = p.data()[i] + k * q.data()[i];
        return LatentImage(p.shape(), v);
    };
    const auto lhs = forward_diffuse(add(a, b, 2.5), 9, add(e1, e2, -1.5), s);
    // Check f(a + 2.5 b, e1 - 1.5 e2) = f(a, e1) + 2.5 f(b, 0) - 1.5 f(0, e2).
    const auto zero = constant(4, 4, 1, 0.0);
    const auto fa = forward_diffuse(a, 9, e1, s);
    const auto fb = forward_diffuse(b, 9, zero, s);
    const auto fe = forward_diffuse(zero, 9, e2, s);
    for (std::size_t i = 0; i < lhs.size(); ++i)
        EXPECT_NEAR(lhs.data()[i], fa.data()[i] + 2.5 * fb.data()[i] - 1.5 * fe.data()[i], 1e-12);
}

TEST(Forward, MonteCarloMarginal) {
    Rng rng(3);
    const auto s = make_schedule(50);
    const int t = 30, n = 10000;
    const double x0 = 0.7, ab = s.alpha_bar(t);
    double sum = 0, sq = 0;
    const LatentImage x(1, 1, 1, {x0});
    for (int i = 0; i < n; ++i) {
        const double v = forward_diffuse(x, t, noise_image(1, 1, 1, rng), s).data()[0];
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n, var = sq / n - mean * mean;
    const double sd = std::sqrt(1 - ab);
    EXPECT_NEAR(mean, std::sqrt(ab) * x0, 3 * sd / std::sqrt(n));
    EXPECT_NEAR(var, 1 - ab, 3 * (1 - ab) * std::sqrt(2.0 / (n - 1)));
}

TEST(Forward, ShapeMismatch) {
    const auto s = make_schedule(10);
    EXPECT_THROW(forward_diffuse(constant(2, 2, 1, 0), 1, constant(2, 3, 1, 0), s), ShapeError);
    EXPECT_THROW(forward_diffuse(constant(2, 2, 1, 0), 11, constant(2, 2, 1, 0), s), DomainError);
}

TEST(Reverse, ZeroPredictionScalesInput) {
    const auto s = make_schedule(10);
    Rng rng(4);
    const auto xt = noise_image(3, 2, 3, rng);
    const auto zero = constant(3, 2, 3, 0.0);
    const auto y = reverse_step(xt, 5, zero, s, zero);
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y.data()[i], xt.data()[i] / std::sqrt(s.alpha(5)), 1e-15);
}

TEST(Reverse, HandEvaluatedScalar) {
    // beta_1 chosen so that abar_2 = 0.5 with alpha_2 = 0.99.
    const NoiseSchedule s({1.0 - 0.5 / 0.99, 0.01});
    ASSERT_NEAR(s.alpha_bar(2), 0.5, 1e-15);
    const LatentImage one(1, 1, 1, {1.0}), zero(1, 1, 1, {0.0});
    const double y = reverse_step(one, 2, one, s, zero).data()[0];
    EXPECT_NEAR(y, (1.0 - 0.01 / std::sqrt(0.5)) / std::sqrt(0.99), 1e-15);
    EXPECT_NEAR(y, 0.9908244341688381, 1e-15);
}

TEST(Reverse, FinalStepRejectsNoise) {
    const auto s = make_schedule(3);
    const LatentImage one(1, 1, 1, {1.0});
    EXPECT_THROW(reverse_step(one, 1, one, s, one), DomainError);
    EXPECT_NO_THROW(reverse_step(one, 2, one, s, one));
}

TEST(Reverse, PredictX0InvertsForward) {
    Rng rng(6);
    const auto s = make_schedule(40);
    const auto x0 = noise_image(2, 2, 3, rng), eps = noise_image(2, 2, 3, rng);
    const auto back = predict_x0(forward_diffuse(x0, 33, eps, s), 33, eps, s);
    for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(back.data()[i], x0.data()[i], 1e-12);
}

TEST(Loss, MeanSquaredError) {
    Rng rng(7);
    const auto a = noise_image(5, 4, 3, rng);
    EXPECT_EQ(diffusion_loss(a, a), 0.0);
    std::vector<double> shifted(a.data().begin(), a.data().end());
    for (double& v : shifted) v += 1.0;
    EXPECT_NEAR(diffusion_loss(LatentImage(a.shape(), shifted), a), 1.0, 1e-12);

    const auto b = noise_image(5, 4, 3, rng);
    double loop = 0;
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 3; ++c) {
                const double d = a(y, x, c) - b(y, x, c);
                loop += d * d;
            }
    EXPECT_NEAR(diffusion_loss(a, b), loop / 60.0, 1e-12);
    EXPECT_THROW(diffusion_loss(a, constant(5, 4, 1, 0)), ShapeError);
}

namespace {

class FixedReward final : public RewardModel {
public:
    explicit FixedReward(std::vector<double> p) : p_(std::move(p)) {}
    std::vector<double> predict(const Image&) const override { return p_; }

private:
    std::vector<double> p_;
};

}  // namespace

TEST(RewardLoss, ClosedForms) {
    ConditionSet cond;
    cond.contour = ContourMask(1, 2, {1, 0});
    const Image img = Image::filled(1, 2, 3, 0.5);
    EXPECT_NEAR(reward_loss(cond, img, FixedReward({0.9, 0.2})), -(std::log(0.9) + std::log(0.8)) / 2, 1e-15);
    EXPECT_NEAR(reward_loss(cond, img, FixedReward({0.9, 0.2})), 0.164252033486018, 1e-14);
    EXPECT_NEAR(reward_loss(cond, img, FixedReward({0.5, 0.5})), std::log(2.0), 1e-15);
    EXPECT_LE(reward_loss(cond, img, FixedReward({1.0, 0.0})), 1.1e-7);
    EXPECT_THROW(reward_loss(cond, img, FixedReward({0.5})), ShapeError);
}

TEST(RewardLoss, MinimizedAtTarget) {
    const std::vector<double> target = {0.3, 0.8, 0.5, 0.1};
    const double base = binary_cross_entropy(target, target);
    for (std::size_t i = 0; i < target.size(); ++i)
        for (double d : {-0.05, 0.05}) {
            auto p = target;
            p[i] += d;
            EXPECT_GT(binary_cross_entropy(target, p), base);
        }
}

TEST(RewardLoss, SoftContourMatchesHardSplitAtLowTemperature) {
    const Image img(1, 3, 1, {0.1, 0.49, 0.9});
    const auto p = SoftContourReward(0.5, 1e-4).predict(img);
    EXPECT_NEAR(p[0], 1.0, 1e-12);
    EXPECT_GT(p[1], 0.999);
    EXPECT_NEAR(p[2], 0.0, 1e-12);
}

TEST(TotalLoss, WeightedSum) {
    EXPECT_EQ(total_loss(0.3, 5.0, 0.0), 0.3);
    EXPECT_NEAR(total_loss(0.5, 0.2, 1.0), 0.7, 1e-15);
    EXPECT_EQ(total_loss(1.0, 2.0, 0.5), 2.0);
    EXPECT_THROW(total_loss(-1, 0, 0), DomainError);
    EXPECT_THROW(total_loss(NAN, 0, 0), NonFiniteError);
}

TEST(PairwiseSum, MatchesNaiveSumOnIntegers) {
    std::vector<double> v(1001);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
    EXPECT_EQ(pairwise_sum(v), 500500.0);
}
