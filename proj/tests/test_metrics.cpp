// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "mural/core/rng.hpp"
#include "mural/metrics.hpp"

using namespace mural;

namespace {

Image random_image(int h, int w, int c, Rng& rng, double lo = 0.0, double hi = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(h) * w * c);
    for (double& x : v) x = rng.uniform(lo, hi);
    return Image(h, w, c, v);
}

Image checkerboard(int n, double a, double b) {
    std::vector<double> v(static_cast<std::size_t>(n) * n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) v[y * n + x] = (x + y) % 2 ? a : b;
    return Image(n, n, 1, v);
}

}  // namespace

TEST(Ssim, IdentityIsOne) {
    Rng rng(1);
    const Image x = random_image(16, 20, 3, rng);
    EXPECT_EQ(ssim(x, x), 1.0);
}

TEST(Ssim, ConstantImagesClosedForm) {
    const double c1 = 1e-4;
    EXPECT_NEAR(ssim(Image::filled(12, 12, 1, 0.0), Image::filled(12, 12, 1, 1.0)), c1 / (1 + c1), 1e-8);
}

TEST(Ssim, SymmetricAndBounded) {
    Rng rng(2);
    const Image x = random_image(14, 14, 1, rng);
    std::vector<double> inv(x.size());
    for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1 - x.data()[i];
    const Image y(x.shape(), inv);
    const double a = ssim(x, y), b = ssim(y, x);
    EXPECT_EQ(a, b);
    EXPECT_GE(a, -1.0);
    EXPECT_LE(a, 1.0);
    EXPECT_LT(a, 0.0);
}

TEST(Ssim, Errors) {
    Rng rng(3);
    EXPECT_THROW(ssim(random_image(8, 8, 1, rng), random_image(8, 8, 1, rng)), DomainError);
    EXPECT_THROW(ssim(random_image(12, 12, 1, rng), random_image(12, 13, 1, rng)), ShapeError);
}

TEST(Ssim, MaskRestrictsWindows) {
    Rng rng(4);
    const Image x = random_image(24, 24, 1, rng);
    std::vector<double> v(x.values());
    for (int y = 0; y < 24; ++y)
        for (int c = 0; c < 8; ++c) v[y * 24 + c] = 0.5;  // corrupt the left strip
    const Image y(x.shape(), v);
    std::vector<std::uint8_t> right(576, 0);
    for (int r = 0; r < 24; ++r)
        for (int c = 14; c < 24; ++c) right[r * 24 + c] = 1;
    const ContourMask m(24, 24, right);
    EXPECT_EQ(ssim(x, y, {}, &m), 1.0);
    EXPECT_LT(ssim(x, y), 1.0);
}

TEST(ChiSquare, HandValues) {
    const Histogram a{{4, 0}}, b{{0, 4}};
    EXPECT_EQ(chi_square(a, b), 8.0);
    EXPECT_EQ(chi_square(a, a), 0.0);
    const Histogram p{{3, 1, 0, 2}}, q{{1, 1, 0, 5}};
    const Histogram p3{{9, 3, 0, 6}}, q3{{3, 3, 0, 15}};
    EXPECT_NEAR(chi_square(p3, q3), 3 * chi_square(p, q), 1e-12);
    EXPECT_THROW(chi_square(a, Histogram{{1, 2, 3}}), ShapeError);
}

TEST(Ccon, IdenticalAndDisjoint) {
    Rng rng(5);
    const Image x = random_image(6, 6, 3, rng);
    const auto same = ccon(x, x);
    EXPECT_EQ(same.chi2, 0.0);
    EXPECT_EQ(same.similarity, 1.0);
    const auto d = ccon(Image::filled(4, 4, 3, 0.1), Image::filled(4, 4, 3, 0.9));
    EXPECT_DOUBLE_EQ(d.chi2, 2.0);  // unit-mass single bins: 1 + 1 per channel
    EXPECT_DOUBLE_EQ(d.similarity, 1.0 / 3.0);
    HistogramParams raw;
    raw.normalize = false;
    EXPECT_DOUBLE_EQ(ccon(Image::filled(4, 4, 3, 0.1), Image::filled(4, 4, 3, 0.9), raw).chi2, 32.0);
}

TEST(Ccon, PermutationInvariant) {
    Rng rng(6);
    const Image x = random_image(5, 5, 3, rng), y = random_image(5, 5, 3, rng);
    std::vector<int> perm(25);
    for (int i = 0; i < 25; ++i) perm[i] = (i * 7) % 25;
    std::vector<double> v(75);
    for (int p = 0; p < 25; ++p)
        for (int c = 0; c < 3; ++c) v[p * 3 + c] = x.data()[perm[p] * 3 + c];
    EXPECT_DOUBLE_EQ(ccon(Image(x.shape(), v), y).chi2, ccon(x, y).chi2);
}

TEST(Lbp, ConstantAndIsolatedPeak) {
    const auto h = lbp_histogram(Image::filled(5, 5, 1, 0.4));
    EXPECT_EQ(h.counts[255], 9.0);
    EXPECT_EQ(h.total(), 9.0);
    std::vector<double> v(9, 0.0);
    v[4] = 1.0;
    EXPECT_EQ(lbp_code(Image(3, 3, 1, v), 1, 1), 0);
    EXPECT_THROW(lbp_histogram(Image::filled(2, 5, 1, 0.1)), DomainError);
}

TEST(Lbp, HandCraftedPatch) {
    const Image p(4, 4, 1, {0.1, 0.2, 0.3, 0.4,  //
                            0.5, 0.6, 0.1, 0.9,  //
                            0.2, 0.8, 0.7, 0.3,  //
                            0.6, 0.4, 0.5, 0.0});
    EXPECT_EQ(lbp_code(p, 1, 1), 6);    // SE, S
    EXPECT_EQ(lbp_code(p, 1, 2), 255);  // local minimum
    EXPECT_EQ(lbp_code(p, 2, 1), 0);    // local maximum
    EXPECT_EQ(lbp_code(p, 2, 2), 144);  // W, NE
}

TEST(Tcon, IdentityOffsetAndDisjointTextures) {
    Rng rng(7);
    const Image x = random_image(8, 8, 1, rng, 0.0, 0.8);
    EXPECT_EQ(tcon(x, x).similarity, 1.0);
    std::vector<double> v(x.values());
    for (double& a : v) a += 0.1;
    EXPECT_EQ(tcon(Image(x.shape(), v), x).similarity, 1.0);

    // A horizontal ramp codes every interior pixel as E|SE|S|N|NE = 199.
    std::vector<double> ramp(36);
    for (int y = 0; y < 6; ++y)
        for (int c = 0; c < 6; ++c) ramp[y * 6 + c] = 0.1 * c;
    const Image r(6, 6, 1, ramp), flat = Image::filled(6, 6, 1, 0.3);
    EXPECT_EQ(lbp_histogram(r).counts[199], 16.0);
    EXPECT_DOUBLE_EQ(tcon(flat, r, false).chi2, 2 * 16.0);
    EXPECT_DOUBLE_EQ(tcon(flat, r, true).chi2, 2.0);
}

TEST(Tcon, CheckerboardAgainstConstant) {
    // Under the >= rule, dark squares see every neighbour as >= and code 255,
    // light squares code the diagonals only (170).
    const Image cb = checkerboard(6, 1.0, 0.0), flat = Image::filled(6, 6, 1, 0.5);
    const auto h = lbp_histogram(cb);
    EXPECT_EQ(h.counts[255], 8.0);
    EXPECT_EQ(h.counts[170], 8.0);
    const double n = 16;
    EXPECT_DOUBLE_EQ(tcon(flat, cb, false).chi2, (n / 2) * (n / 2) / (1.5 * n) + (n / 2));
}

TEST(Econ, GoldenValues) {
    Rng rng(8);
    const Image x = random_image(10, 10, 3, rng, 0.2, 0.6);
    EXPECT_EQ(econ(x, x), 0.0);
    EXPECT_NEAR(econ(Image::filled(10, 10, 3, 0.5), x), 1.0, 1e-10);
    std::vector<double> v(x.values());
    for (double& a : v) a = 0.4 + 2 * (a - 0.4);
    EXPECT_NEAR(econ(Image(x.shape(), v), x), 1.0, 1e-10);
    EXPECT_NEAR(econ(Image(x.shape(), v), x, EconMode::edge_map), 1.0, 1e-10);
    EXPECT_THROW(econ(x, Image::filled(10, 10, 3, 0.5)), DegenerateInputError);
}

TEST(Econ, NonNegativeAndMaskAware) {
    Rng rng(9);
    const Image a = random_image(12, 12, 1, rng), b = random_image(12, 12, 1, rng);
    EXPECT_GT(econ(a, b), 0.0);
    std::vector<std::uint8_t> m(144, 0);
    m[50] = 1;
    const ContourMask mask(12, 12, m);
    EXPECT_GE(econ(a, b, EconMode::edge_gradient, &mask), 0.0);
    const ContourMask empty(12, 12);
    EXPECT_THROW(econ(a, b, EconMode::edge_gradient, &empty), DegenerateInputError);
}

TEST(Evaluate, ReportFieldsConsistent) {
    Rng rng(10);
    const Image a = random_image(16, 16, 3, rng), b = random_image(16, 16, 3, rng);
    const auto r = evaluate(a, b);
    EXPECT_DOUBLE_EQ(r.ccon.similarity, 1 / (1 + r.ccon.chi2));
    EXPECT_DOUBLE_EQ(r.tcon.similarity, 1 / (1 + r.tcon.chi2));
    EXPECT_FALSE(r.masked);
    const auto same = evaluate(a, a);
    EXPECT_EQ(same.ssim, 1.0);
    EXPECT_EQ(same.econ, 0.0);
    EXPECT_EQ(same.ccon.similarity, 1.0);
    EXPECT_EQ(same.tcon.similarity, 1.0);
}

TEST(MeanFill, UsesKnownPixelMean) {
    const Image img(1, 4, 1, {0.2, 0.9, 0.4, 0.6});
    const ContourMask miss(1, 4, {0, 1, 0, 1});
    const Image f = mean_fill(img, miss);
    EXPECT_DOUBLE_EQ(f.data()[1], 0.3);
    EXPECT_DOUBLE_EQ(f.data()[3], 0.3);
    EXPECT_EQ(f.data()[0], 0.2);
    EXPECT_THROW(mean_fill(img, ContourMask(1, 4, {1, 1, 1, 1})), DegenerateInputError);
}
