// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mural/image.hpp"
#include "mural/image_io.hpp"

using namespace mural;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    const auto d = fs::temp_directory_path() / ("mural_image_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
    fs::create_directories(d);
    return d;
}

Image ramp(int h, int w, int c) {
    std::vector<double> v(static_cast<std::size_t>(h) * w * c);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>((i * 37) % 256) / 255.0;
    return Image(h, w, c, v);
}

}  // namespace

TEST(Image, RejectsOutOfRangeAndNonFinite) {
    EXPECT_THROW(Image(1, 1, 1, {1.5}), DomainError);
    EXPECT_THROW(Image(1, 1, 1, {-0.1}), DomainError);
    EXPECT_THROW(Image(1, 1, 1, {std::nan("")}), NonFiniteError);
    EXPECT_THROW(LatentImage(1, 1, 1, {INFINITY}), NonFiniteError);
    EXPECT_NO_THROW(LatentImage(1, 1, 1, {-7.0}));
    EXPECT_THROW(Image(2, 2, 1, {0.0, 0.0}), ShapeError);
}

TEST(Image, LatentShiftRoundTrip) {
    const Image img = ramp(3, 4, 3);
    const LatentImage lat = to_latent(img);
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_DOUBLE_EQ(lat.data()[i], 2 * img.data()[i] - 1);
    const Image back = to_image(lat);
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back.data()[i], img.data()[i], 1e-15);
}

TEST(Resample, ConstantPreserved) {
    const Image c = Image::filled(8, 8, 1, 0.5);
    const Image up = resample(c, 16, 16, ResampleMode::bilinear);
    ASSERT_EQ(up.height(), 16);
    for (double v : up.data()) EXPECT_EQ(v, 0.5);
}

TEST(Resample, IdentityIsExact) {
    const Image img = ramp(5, 7, 3);
    const Image same = resample(img, 5, 7, ResampleMode::bilinear);
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(same.data()[i], img.data()[i], 1e-12);
}

TEST(Resample, TwoPixelBilinearIsMonotone) {
    const Image img(2, 1, 1, {0.0, 1.0});
    const Image up = resample(img, 4, 1, ResampleMode::bilinear);
    // Half-pixel centres: sources at -0.25, 0.25, 0.75, 1.25 clamp to 0, 0.25, 0.75, 1.
    const double expect[4] = {0.0, 0.25, 0.75, 1.0};
    for (int y = 0; y < 4; ++y) EXPECT_NEAR(up(y, 0), expect[y], 1e-15);
    for (int y = 1; y < 4; ++y) EXPECT_GE(up(y, 0), up(y - 1, 0));
}

TEST(Resample, RejectsBadTarget) {
    EXPECT_THROW(resample(ramp(2, 2, 1), 0, 2, ResampleMode::bilinear), DomainError);
    EXPECT_THROW(resample(ramp(2, 2, 1), 2, -1, ResampleMode::nearest), DomainError);
}

TEST(Resample, UpDownRoundTripBounded) {
    const Image img = ramp(6, 6, 1);
    const Image rt = resample(resample(img, 12, 12, ResampleMode::bilinear), 6, 6, ResampleMode::bilinear);
    double worst = 0;
    for (std::size_t i = 0; i < img.size(); ++i) worst = std::max(worst, std::abs(rt.data()[i] - img.data()[i]));
    EXPECT_LT(worst, 1.0);
    const Image c = Image::filled(6, 6, 3, 0.3);
    const Image crt = resample(resample(c, 12, 12, ResampleMode::bilinear), 6, 6, ResampleMode::bilinear);
    for (double v : crt.data()) EXPECT_EQ(v, 0.3);
}

TEST(Grayscale, Weights) {
    EXPECT_DOUBLE_EQ(to_grayscale(Image(1, 1, 3, {1, 1, 1}))(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(to_grayscale(Image(1, 1, 3, {1, 0, 0}))(0, 0), 0.299);
    const Image g = ramp(3, 3, 1);
    EXPECT_EQ(to_grayscale(g).values(), g.values());
    const Image rgb = ramp(4, 4, 3);
    EXPECT_EQ(to_grayscale(to_grayscale(rgb)).values(), to_grayscale(rgb).values());
}

TEST(Pyramid, ValidatesLevels) {
    const Image fine = ramp(16, 24, 3);
    const auto pyr = ScalePyramid<detail::UnitIntervalDomain>::build(fine, {4, 8, 16});
    EXPECT_EQ(pyr.size(), 3u);
    EXPECT_EQ(pyr.canonical_shape(), fine.shape());
    EXPECT_EQ(pyr[0].image.width(), 6);
    using P = ScalePyramid<detail::UnitIntervalDomain>;
    EXPECT_THROW(P({{0, ramp(8, 8, 1)}, {1, ramp(8, 8, 1)}}), DomainError);
    EXPECT_THROW(P({{0, ramp(4, 6, 1)}, {1, ramp(8, 8, 1)}}), DomainError);
}

TEST(ImageIo, PngRoundTrip8Bit) {
    const auto dir = temp_dir();
    const Image img(3, 3, 1, {0, 128 / 255.0, 1, 1, 0, 128 / 255.0, 128 / 255.0, 1, 0});
    write_image(img, dir / "a.png");
    const Image back = read_image(dir / "a.png");
    EXPECT_EQ(back.shape(), img.shape());
    EXPECT_EQ(back.values(), img.values());
    const Image rgb = ramp(5, 4, 3);
    write_image(rgb, dir / "b.png");
    EXPECT_EQ(read_image(dir / "b.png").values(), rgb.values());
}

TEST(ImageIo, PngSixteenBitFullScale) {
    const auto dir = temp_dir();
    std::vector<double> v = {1.0, 0.0, 12345 / 65535.0, 65534 / 65535.0};
    write_image(Image(2, 2, 1, v), dir / "g16.png", 16);
    const Image back = read_image(dir / "g16.png");
    EXPECT_EQ(back(0, 0), 1.0);
    EXPECT_EQ(back.values(), v);
}

TEST(ImageIo, PnmRoundTrip) {
    const auto dir = temp_dir();
    const Image g = ramp(4, 5, 1), c = ramp(4, 5, 3);
    write_image(g, dir / "g.pgm");
    write_image(c, dir / "c.ppm");
    EXPECT_EQ(read_image(dir / "g.pgm").values(), g.values());
    EXPECT_EQ(read_image(dir / "c.ppm").values(), c.values());
}

TEST(ImageIo, TruncatedPayloadRejected) {
    const auto dir = temp_dir();
    {
        std::ofstream f(dir / "t.pgm", std::ios::binary);
        f << "P5\n4 4\n255\n";
        f.write("\x01\x02\x03", 3);
    }
    EXPECT_THROW(read_image(dir / "t.pgm"), IoError);
    {
        std::ofstream f(dir / "t.png", std::ios::binary);
        f << "\x89PNG\r\n\x1a\n";
    }
    EXPECT_THROW(read_image(dir / "t.png"), IoError);
}

TEST(ImageIo, UnsupportedFormat) {
    EXPECT_THROW(read_image(temp_dir() / "x.bmp"), FormatError);
    EXPECT_THROW(read_image(temp_dir() / "missing.png"), IoError);
}
