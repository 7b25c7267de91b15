// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "mural/core/error.hpp"

namespace mural {

struct Shape {
    int height = 0;
    int width = 0;
    int channels = 0;

    std::size_t size() const {
        return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
               static_cast<std::size_t>(channels);
    }
    bool operator==(const Shape&) const = default;
    std::string str() const {
        return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels);
    }
};

namespace detail {

struct UnitIntervalDomain {
    static constexpr const char* name = "Image";
    static void check(std::span<const double> data) {
        for (double v : data) {
            if (!std::isfinite(v)) throw NonFiniteError("Image: non-finite intensity");
            if (v < 0.0 || v > 1.0)
                throw DomainError("Image: intensity " + std::to_string(v) + " outside [0,1]");
        }
    }
};

struct FiniteDomain {
    static constexpr const char* name = "LatentImage";
    static void check(std::span<const double> data) {
        for (double v : data)
            if (!std::isfinite(v)) throw NonFiniteError("LatentImage: non-finite value");
    }
};

}  // namespace detail

// Row-major H x W x C grid of doubles. The domain policy decides which values
// are admissible: Image holds intensities in [0,1], LatentImage any finite value.
template <class Domain>
class BasicImage {
public:
    BasicImage() = default;

    BasicImage(int height, int width, int channels) : shape_{height, width, channels} {
        check_shape(shape_);
        data_.assign(shape_.size(), 0.0);
    }

    BasicImage(int height, int width, int channels, std::vector<double> data)
        : shape_{height, width, channels}, data_(std::move(data)) {
        check_shape(shape_);
        if (data_.size() != shape_.size())
            throw ShapeError(std::string(Domain::name) + ": data length " + std::to_string(data_.size()) +
                             " does not match " + shape_.str());
        Domain::check(data_);
    }

    explicit BasicImage(const Shape& shape) : BasicImage(shape.height, shape.width, shape.channels) {}

    BasicImage(Shape shape, std::vector<double> data)
        : BasicImage(shape.height, shape.width, shape.channels, std::move(data)) {}

    static BasicImage filled(int height, int width, int channels, double value) {
        return BasicImage(height, width, channels,
                          std::vector<double>(static_cast<std::size_t>(height) * width * channels, value));
    }

    int height() const { return shape_.height; }
    int width() const { return shape_.width; }
    int channels() const { return shape_.channels; }
    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    std::size_t pixel_count() const { return static_cast<std::size_t>(shape_.height) * shape_.width; }
    bool empty() const { return data_.empty(); }

    std::size_t index(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * shape_.width + x) * shape_.channels + c;
    }
    double operator()(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }

    std::span<const double> data() const { return data_; }
    const std::vector<double>& values() const { return data_; }

    // Only unclamped working buffers may be edited in place.
    std::span<double> mutable_data()
        requires std::is_same_v<Domain, detail::FiniteDomain>
    {
        return data_;
    }
    double& at(int y, int x, int c = 0)
        requires std::is_same_v<Domain, detail::FiniteDomain>
    {
        return data_[index(y, x, c)];
    }

    // Re-validates after in-place edits; names the context on failure.
    void ensure_valid(const std::string& context) const {
        try {
            Domain::check(data_);
        } catch (const Error& e) {
            throw NonFiniteError(context + ": " + e.what());
        }
    }

    bool operator==(const BasicImage&) const = default;

private:
    static void check_shape(const Shape& s) {
        if (s.height < 1 || s.width < 1)
            throw DomainError(std::string(Domain::name) + ": dimensions must be >= 1, got " + s.str());
        if (s.channels < 1) throw DomainError(std::string(Domain::name) + ": channel count must be >= 1");
    }

    Shape shape_{};
    std::vector<double> data_;
};

using Image = BasicImage<detail::UnitIntervalDomain>;
using LatentImage = BasicImage<detail::FiniteDomain>;

// Diffusion runs on values in [-1,1]; these apply and remove the affine shift.
inline LatentImage to_latent(const Image& img) {
    std::vector<double> v(img.size());
    auto src = img.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 2.0 * src[i] - 1.0;
    return LatentImage(img.shape(), std::move(v));
}

inline Image to_image(const LatentImage& lat) {
    std::vector<double> v(lat.size());
    auto src = lat.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(0.5 * (src[i] + 1.0), 0.0, 1.0);
    return Image(lat.shape(), std::move(v));
}

// Same values, no shift.
inline LatentImage as_latent(const Image& img) { return LatentImage(img.shape(), img.values()); }

inline Image clamp_to_image(const LatentImage& lat) {
    std::vector<double> v(lat.values());
    for (double& x : v) x = std::clamp(x, 0.0, 1.0);
    return Image(lat.shape(), std::move(v));
}

enum class ResampleMode { bilinear, nearest };

namespace detail {

// Half-pixel-centre mapping of destination index to source coordinate.
inline double source_coord(int dst, int src_len, int dst_len) {
    return (dst + 0.5) * static_cast<double>(src_len) / dst_len - 0.5;
}

}  // namespace detail

template <class Domain>
BasicImage<Domain> resample(const BasicImage<Domain>& img, int new_height, int new_width,
                            ResampleMode mode = ResampleMode::bilinear) {
    if (new_height < 1 || new_width < 1)
        throw DomainError("resample: target dimensions must be >= 1, got " + std::to_string(new_height) + "x" +
                          std::to_string(new_width));
    const int h = img.height(), w = img.width(), ch = img.channels();
    if (new_height == h && new_width == w) return img;
    std::vector<double> out(static_cast<std::size_t>(new_height) * new_width * ch);
    auto src = img.data();
    auto at = [&](int y, int x, int c) { return src[(static_cast<std::size_t>(y) * w + x) * ch + c]; };
    for (int y = 0; y < new_height; ++y) {
        for (int x = 0; x < new_width; ++x) {
            double* dst = &out[(static_cast<std::size_t>(y) * new_width + x) * ch];
            if (mode == ResampleMode::nearest) {
                const int sy = std::min(h - 1, static_cast<int>((y + 0.5) * h / new_height));
                const int sx = std::min(w - 1, static_cast<int>((x + 0.5) * w / new_width));
                for (int c = 0; c < ch; ++c) dst[c] = at(sy, sx, c);
                continue;
            }
            const double fy = std::clamp(detail::source_coord(y, h, new_height), 0.0, h - 1.0);
            const double fx = std::clamp(detail::source_coord(x, w, new_width), 0.0, w - 1.0);
            const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
            const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const double wy = fy - y0, wx = fx - x0;
            for (int c = 0; c < ch; ++c) {
                const double top = at(y0, x0, c) * (1.0 - wx) + at(y0, x1, c) * wx;
                const double bot = at(y1, x0, c) * (1.0 - wx) + at(y1, x1, c) * wx;
                double v = top * (1.0 - wy) + bot * wy;
                if constexpr (std::is_same_v<Domain, detail::UnitIntervalDomain>) v = std::clamp(v, 0.0, 1.0);
                dst[c] = v;
            }
        }
    }
    return BasicImage<Domain>(new_height, new_width, ch, std::move(out));
}

inline constexpr double kLumaR = 0.299;
inline constexpr double kLumaG = 0.587;
inline constexpr double kLumaB = 0.114;

inline double luminance(double r, double g, double b) { return kLumaR * r + kLumaG * g + kLumaB * b; }

template <class Domain>
BasicImage<Domain> to_grayscale(const BasicImage<Domain>& img) {
    if (img.channels() == 1) return img;
    if (img.channels() != 3)
        throw DomainError("to_grayscale: expected 1 or 3 channels, got " + std::to_string(img.channels()));
    std::vector<double> out(img.pixel_count());
    auto src = img.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        double v = luminance(src[3 * i], src[3 * i + 1], src[3 * i + 2]);
        if constexpr (std::is_same_v<Domain, detail::UnitIntervalDomain>) v = std::clamp(v, 0.0, 1.0);
        out[i] = v;
    }
    return BasicImage<Domain>(img.height(), img.width(), 1, std::move(out));
}

// Coarsest-to-finest stack of the same content at several resolutions.
template <class Domain>
class ScalePyramid {
public:
    struct Level {
        int scale_id;
        BasicImage<Domain> image;
    };

    explicit ScalePyramid(std::vector<Level> levels) : levels_(std::move(levels)) {
        if (levels_.empty()) throw DomainError("ScalePyramid: at least one level required");
        const auto& fine = levels_.back().image;
        for (std::size_t i = 0; i < levels_.size(); ++i) {
            const auto& im = levels_[i].image;
            if (i > 0) {
                const auto& prev = levels_[i - 1].image;
                if (im.height() <= prev.height() || im.width() <= prev.width())
                    throw DomainError("ScalePyramid: levels must strictly grow toward the finest level");
            }
            // a/b == c/d, checked without division
            if (static_cast<long long>(im.height()) * fine.width() != static_cast<long long>(im.width()) * fine.height())
                throw DomainError("ScalePyramid: aspect ratio differs across levels");
        }
    }

    // Builds levels by resampling the finest image to each requested size.
    static ScalePyramid build(const BasicImage<Domain>& finest, const std::vector<int>& heights,
                              ResampleMode mode = ResampleMode::bilinear) {
        std::vector<Level> levels;
        for (std::size_t i = 0; i < heights.size(); ++i) {
            const int h = heights[i];
            const int w = static_cast<int>(static_cast<long long>(h) * finest.width() / finest.height());
            levels.push_back({static_cast<int>(i), resample(finest, h, w, mode)});
        }
        return ScalePyramid(std::move(levels));
    }

    const std::vector<Level>& levels() const { return levels_; }
    std::size_t size() const { return levels_.size(); }
    const Level& operator[](std::size_t i) const { return levels_[i]; }
    Shape canonical_shape() const { return levels_.back().image.shape(); }

private:
    std::vector<Level> levels_;
};

}  // namespace mural
