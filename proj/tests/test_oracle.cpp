// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "mural/oracle.hpp"

using namespace mural;

namespace {

LatentImage scalar(double v) { return LatentImage(1, 1, 1, {v}); }

MixtureSpec two_point(double m, double var, double w = 0.5) {
    return MixtureSpec{{{w, {scalar(-m), var}}, {1 - w, {scalar(m), var}}}};
}

}  // namespace

TEST(GaussianOracle, UnitVarianceSimplifies) {
    const auto s = make_schedule(30);
    Rng rng(1);
    std::vector<double> v(12);
    for (double& x : v) x = rng.normal();
    const LatentImage xt(2, 2, 3, v);
    const GaussianSpec spec{LatentImage(2, 2, 3), 1.0};
    for (int t : {1, 10, 30}) {
        const auto e = oracle_eps_gaussian(xt, t, s, spec);
        for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(e.data()[i], std::sqrt(1 - s.alpha_bar(t)) * v[i], 1e-15);
    }
}

TEST(GaussianOracle, ZeroResidualGivesZero) {
    const auto s = make_schedule(30);
    const LatentImage m(1, 2, 1, {0.4, -0.3});
    const double ra = std::sqrt(s.alpha_bar(12));
    const LatentImage xt(1, 2, 1, {ra * 0.4, ra * -0.3});
    const auto e = oracle_eps_gaussian(xt, 12, s, {m, 0.2});
    for (double v : e.data()) EXPECT_NEAR(v, 0.0, 1e-16);
}

TEST(GaussianOracle, BeatsPerturbedPredictors) {
    const auto s = make_schedule(50);
    const int t = 20, n = 10000;
    const double m = 0.3, var = 0.25, ab = s.alpha_bar(t);
    Rng rng(2);
    std::vector<double> xt(n), eps(n);
    for (int i = 0; i < n; ++i) {
        const double x0 = m + std::sqrt(var) * rng.normal();
        eps[i] = rng.normal();
        xt[i] = std::sqrt(ab) * x0 + std::sqrt(1 - ab) * eps[i];
    }
    const GaussianSpec spec{scalar(m), var};
    std::vector<double> pred(n);
    for (int i = 0; i < n; ++i) pred[i] = oracle_eps_gaussian(scalar(xt[i]), t, s, spec).data()[0];
    auto mse = [&](double gain, double shift) {
        double e = 0;
        for (int i = 0; i < n; ++i) {
            const double d = gain * pred[i] + shift - eps[i];
            e += d * d;
        }
        return e / n;
    };
    const double best = mse(1, 0);
    Rng pert(3);
    // Perturbations are kept well above the Monte-Carlo resolution of 1/sqrt(n).
    auto signed_mag = [&](double lo, double hi) { return (pert.uniform() < 0.5 ? -1 : 1) * pert.uniform(lo, hi); };
    for (int k = 0; k < 100; ++k) EXPECT_LT(best, mse(1 + signed_mag(0.05, 0.2), signed_mag(0.0, 0.1)));
}

TEST(MixtureOracle, SingleComponentEqualsGaussian) {
    const auto s = make_schedule(40);
    const GaussianSpec g{LatentImage(1, 2, 3, {0.1, -0.2, 0.3, 0.5, 0.0, -0.9}), 0.3};
    Rng rng(4);
    std::vector<double> v(6);
    for (double& x : v) x = rng.normal();
    const LatentImage xt(1, 2, 3, v);
    const auto a = oracle_eps_gaussian(xt, 17, s, g);
    const auto b = oracle_eps_mixture(xt, 17, s, MixtureSpec{{{1.0, g}}});
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-15);
}

TEST(MixtureOracle, SymmetricComponentsAtOrigin) {
    const auto s = make_schedule(40);
    const auto spec = two_point(0.8, 0.1);
    const auto r = mixture_responsibilities(scalar(0.0), 9, s, spec);
    EXPECT_DOUBLE_EQ(r[0][0], 0.5);
    EXPECT_DOUBLE_EQ(r[1][0], 0.5);
    const double avg = 0.5 * oracle_eps_gaussian(scalar(0.0), 9, s, spec.components[0].gaussian).data()[0] +
                       0.5 * oracle_eps_gaussian(scalar(0.0), 9, s, spec.components[1].gaussian).data()[0];
    EXPECT_NEAR(oracle_eps_mixture(scalar(0.0), 9, s, spec).data()[0], avg, 1e-15);
    EXPECT_NEAR(avg, 0.0, 1e-15);
}

TEST(MixtureOracle, ResponsibilitiesNormalizedAndStable) {
    const auto s = make_schedule(40);
    const MixtureSpec spec{{{0.2, {scalar(-1), 0.01}}, {0.5, {scalar(0.2), 0.05}}, {0.3, {scalar(1), 0.02}}}};
    for (double x : {-1e6, -50.0, -1.0, 0.0, 0.3, 7.0, 1e6})
        for (int t : {1, 20, 40}) {
            const auto r = mixture_responsibilities(scalar(x), t, s, spec);
            double sum = 0;
            for (const auto& k : r) {
                EXPECT_TRUE(std::isfinite(k[0]));
                EXPECT_GE(k[0], 0.0);
                sum += k[0];
            }
            EXPECT_NEAR(sum, 1.0, 1e-12);
            EXPECT_TRUE(std::isfinite(oracle_eps_mixture(scalar(x), t, s, spec).data()[0]));
        }
}

TEST(MixtureOracle, ContinuousInXt) {
    const auto s = make_schedule(40);
    const auto spec = two_point(1.0, 0.05, 0.3);
    double prev = oracle_eps_mixture(scalar(-3.0), 5, s, spec).data()[0];
    for (double x = -3.0 + 1e-3; x < 3.0; x += 1e-3) {
        const double cur = oracle_eps_mixture(scalar(x), 5, s, spec).data()[0];
        EXPECT_LT(std::abs(cur - prev), 0.05);
        prev = cur;
    }
}

TEST(MixtureSpec, Validation) {
    EXPECT_THROW(MixtureSpec{}.validate(), DomainError);
    EXPECT_THROW(two_point(1, 0.1, 0.0).validate(), DomainError);
    EXPECT_THROW((MixtureSpec{{{0.5, {scalar(0), 0.1}}, {0.4, {scalar(1), 0.1}}}}.validate()), DomainError);
    EXPECT_THROW((GaussianSpec{scalar(0), 0.0}.validate()), DomainError);
}

TEST(ReverseChain, GaussianMomentsMatchTarget) {
    const auto s = make_scaled_schedule(100);
    const GaussianSpec spec{LatentImage(2, 2, 1, {0.5, -0.25, 0.0, 0.75}), 0.3};
    Rng rng(5);
    const int n = 2000;
    std::vector<double> sum(4, 0), sq(4, 0);
    for (int i = 0; i < n; ++i) {
        const auto x = reverse_chain(spec.mean.shape(), s, rng,
                                     [&](const LatentImage& xt, int t) { return oracle_eps_gaussian(xt, t, s, spec); });
        for (int p = 0; p < 4; ++p) {
            sum[p] += x.data()[p];
            sq[p] += x.data()[p] * x.data()[p];
        }
    }
    for (int p = 0; p < 4; ++p) {
        const double mean = sum[p] / n, var = sq[p] / n - mean * mean;
        EXPECT_NEAR(mean, spec.mean.data()[p], 3 * std::sqrt(spec.variance / n));
        EXPECT_NEAR(var, spec.variance, 3 * spec.variance * std::sqrt(2.0 / (n - 1)));
    }
}

TEST(ReverseChain, MixtureMatchesTargetCdf) {
    const auto s = make_scaled_schedule(200);
    const auto spec = two_point(1.0, 0.1);
    const OraclePredictor oracle(spec, s);
    Rng rng(6);
    std::vector<double> samples;
    const ConditionSet none;
    for (int i = 0; i < 10000; ++i)
        samples.push_back(reverse_chain(Shape{1, 1, 1}, s, rng, [&](const LatentImage& xt, int t) {
                              return oracle.predict(xt, t, none);
                          }).data()[0]);
    EXPECT_LT(ks_statistic(samples, [&](double x) { return mixture_cdf(spec, 0, x); }), 0.03);
}

TEST(Ks, UniformSamplesAgainstUniformCdf) {
    std::vector<double> v;
    for (int i = 0; i < 100; ++i) v.push_back((i + 0.5) / 100);
    EXPECT_NEAR(ks_statistic(v, [](double x) { return x; }), 0.005, 1e-12);
    EXPECT_NEAR(normal_cdf(0.0), 0.5, 1e-16);
}
