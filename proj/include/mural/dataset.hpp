// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "mural/contour.hpp"
#include "mural/core/error.hpp"
#include "mural/core/rng.hpp"
#include "mural/image.hpp"

namespace mural {

struct CropPlan {
    int patch_size = 0;
    double overlap = 0.0;
    int stride = 0;
    std::vector<int> row_origins, col_origins;

    std::size_t count() const { return row_origins.size() * col_origins.size(); }
};

namespace detail {

inline std::vector<int> axis_origins(int dim, int patch, int stride) {
    std::vector<int> o;
    for (int p = 0; p + patch <= dim; p += stride) o.push_back(p);
    if (o.back() != dim - patch) o.push_back(dim - patch);
    return o;
}

}  // namespace detail

// Origins at multiples of floor(patch * (1 - overlap)), plus a final
// edge-aligned origin so every pixel is covered.
inline CropPlan plan_crops(int height, int width, int patch_size, double overlap) {
    if (patch_size < 1) throw DomainError("plan_crops: patch size must be >= 1");
    if (!(overlap >= 0.0 && overlap < 1.0)) throw DomainError("plan_crops: overlap must lie in [0,1)");
    if (patch_size > height || patch_size > width)
        throw DomainError("plan_crops: patch " + std::to_string(patch_size) + " larger than image " +
                          std::to_string(height) + "x" + std::to_string(width));
    CropPlan plan;
    plan.patch_size = patch_size;
    plan.overlap = overlap;
    plan.stride = std::max(1, static_cast<int>(std::floor(patch_size * (1.0 - overlap) + 1e-9)));
    plan.row_origins = detail::axis_origins(height, patch_size, plan.stride);
    plan.col_origins = detail::axis_origins(width, patch_size, plan.stride);
    return plan;
}

template <class Domain>
BasicImage<Domain> crop(const BasicImage<Domain>& img, int y0, int x0, int h, int w) {
    if (y0 < 0 || x0 < 0 || h < 1 || w < 1 || y0 + h > img.height() || x0 + w > img.width())
        throw DomainError("crop: window outside image");
    const int C = img.channels();
    std::vector<double> v;
    v.reserve(static_cast<std::size_t>(h) * w * C);
    for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x)
            for (int c = 0; c < C; ++c) v.push_back(img(y, x, c));
    return BasicImage<Domain>(h, w, C, std::move(v));
}

inline ContourMask crop(const ContourMask& m, int y0, int x0, int h, int w) {
    std::vector<std::uint8_t> v;
    v.reserve(static_cast<std::size_t>(h) * w);
    for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) v.push_back(m(y, x));
    return ContourMask(h, w, std::move(v));
}

struct FilterVerdict {
    bool keep = true;
    double dark_fraction = 0.0;
};

// Rejects patches whose share of near-black pixels exceeds the limit (strictly).
inline FilterVerdict filter_invalid(const Image& patch, double black_threshold = 0.02, double black_fraction_max = 0.05) {
    if (!(black_threshold >= 0.0 && black_threshold <= 1.0) || !(black_fraction_max >= 0.0 && black_fraction_max <= 1.0))
        throw DomainError("filter_invalid: thresholds must lie in [0,1]");
    const Image g = to_grayscale(patch);
    std::size_t dark = 0;
    for (double v : g.data()) dark += v < black_threshold;
    FilterVerdict r;
    r.dark_fraction = g.size() ? static_cast<double>(dark) / g.size() : 0.0;
    r.keep = !(r.dark_fraction > black_fraction_max);
    return r;
}

using Color = std::array<double, 3>;

struct SyntheticMuralSpec {
    int height = 64, width = 64;
    std::vector<Color> ground_palette{{0.86, 0.78, 0.62}, {0.82, 0.72, 0.58}, {0.88, 0.82, 0.70}};
    std::vector<Color> stroke_palette{{0.36, 0.14, 0.10}, {0.12, 0.26, 0.22}, {0.16, 0.13, 0.11}, {0.45, 0.20, 0.12}};
    int strokes_min = 3, strokes_max = 6;
    double stroke_width_min = 1.5, stroke_width_max = 3.5;  // pixels at 64x64; scales with canvas
    double curvature = 0.4;                                 // control-point offset relative to chord length
    double texture_amplitude = 0.03;
    double grain_amplitude = 0.01;
    double damage_min = 0.2, damage_max = 0.6;
    Color plaster{0.78, 0.74, 0.68};
    double residue_alpha = 0.15;
    std::uint64_t seed = 0;

    void validate() const {
        if (height < 8 || width < 8) throw ConfigError("synth: canvas must be at least 8x8");
        if (ground_palette.empty() || stroke_palette.empty()) throw ConfigError("synth: palettes must be nonempty");
        if (strokes_min < 0 || strokes_max < strokes_min) throw ConfigError("synth: invalid stroke count range");
        if (!(stroke_width_min > 0 && stroke_width_max >= stroke_width_min)) throw ConfigError("synth: invalid stroke widths");
        if (!(damage_min > 0 && damage_max < 1 && damage_min + 0.05 < damage_max))
            throw ConfigError("synth: damage range must satisfy 0 < min < max - 0.05 < 1");
        for (const auto& c : stroke_palette)
            if (luminance(c[0], c[1], c[2]) < 0.1) throw ConfigError("synth: stroke colours must have luminance >= 0.1");
    }
};

struct SynthMural {
    Image clean;
    ContourMask damage;   // 1 = missing
    Image damaged;
    ContourMask strokes;  // generator's stroke raster
};

namespace detail {

struct Canvas {
    int H, W;
    std::vector<double> rgb;
    double* px(int y, int x) { return &rgb[(static_cast<std::size_t>(y) * W + x) * 3]; }
};

// Stamps pixels whose centres lie within radius of a quadratic Bezier curve.
inline void raster_bezier(std::vector<std::uint8_t>& hit, int H, int W, const std::array<double, 6>& c, double radius) {
    const double len = std::hypot(c[4] - c[0], c[5] - c[1]) + std::hypot(c[2] - c[0], c[3] - c[1]);
    const int n = std::max(8, static_cast<int>(len * 4));
    const int r = static_cast<int>(std::ceil(radius));
    for (int i = 0; i <= n; ++i) {
        const double t = static_cast<double>(i) / n, u = 1 - t;
        const double py = u * u * c[0] + 2 * u * t * c[2] + t * t * c[4];
        const double px = u * u * c[1] + 2 * u * t * c[3] + t * t * c[5];
        const int cy = static_cast<int>(std::floor(py)), cx = static_cast<int>(std::floor(px));
        for (int y = cy - r - 1; y <= cy + r + 1; ++y)
            for (int x = cx - r - 1; x <= cx + r + 1; ++x) {
                if (y < 0 || x < 0 || y >= H || x >= W) continue;
                if (std::hypot(y + 0.5 - py, x + 0.5 - px) <= radius) hit[static_cast<std::size_t>(y) * W + x] = 1;
            }
    }
}

inline double coverage(const std::vector<std::uint8_t>& m) {
    return static_cast<double>(std::count(m.begin(), m.end(), 1)) / static_cast<double>(m.size());
}

// One blob (irregular ellipse) or crack (jagged thick polyline).
inline std::vector<std::uint8_t> damage_shape(Rng& rng, int H, int W, double size_scale) {
    std::vector<std::uint8_t> s(static_cast<std::size_t>(H) * W, 0);
    const double dim = std::min(H, W);
    if (rng.uniform() < 0.7) {
        const double cy = rng.uniform(0, H), cx = rng.uniform(0, W);
        const double ry = dim * size_scale * rng.uniform(0.12, 0.3), rx = dim * size_scale * rng.uniform(0.12, 0.3);
        const double rot = rng.uniform(0, std::numbers::pi);
        std::array<double, 4> harm{};
        for (double& h : harm) h = rng.uniform(-0.15, 0.15);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
                const double a = std::cos(rot) * dx + std::sin(rot) * dy, b = -std::sin(rot) * dx + std::cos(rot) * dy;
                const double th = std::atan2(b, a);
                const double wobble = 1 + harm[0] * std::cos(2 * th) + harm[1] * std::sin(3 * th) +
                                      harm[2] * std::cos(5 * th) + harm[3] * std::sin(7 * th);
                if ((a * a) / (rx * rx) + (b * b) / (ry * ry) <= wobble * wobble) s[static_cast<std::size_t>(y) * W + x] = 1;
            }
    } else {
        double y = rng.uniform(0, H), x = rng.uniform(0, W);
        double heading = rng.uniform(0, 2 * std::numbers::pi);
        const int segments = 6 + static_cast<int>(rng.below(6));
        const double seg = dim * size_scale * 0.08;
        const double radius = std::max(0.8, dim * size_scale * rng.uniform(0.02, 0.05));
        for (int i = 0; i < segments; ++i) {
            heading += rng.uniform(-0.6, 0.6);
            const double ny = y + seg * std::sin(heading), nx = x + seg * std::cos(heading);
            raster_bezier(s, H, W, {y, x, (y + ny) / 2, (x + nx) / 2, ny, nx}, radius);
            y = ny, x = nx;
        }
    }
    return s;
}

}  // namespace detail

// Procedural mural: textured light ground, dark curved strokes, and damage
// (blobs and cracks) filled with plaster that keeps a faint stroke residue.
inline SynthMural synth_mural(const SyntheticMuralSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const int H = spec.height, W = spec.width;
    const double scale = std::min(H, W) / 64.0;
    detail::Canvas cv{H, W, std::vector<double>(static_cast<std::size_t>(H) * W * 3)};

    const Color ground = spec.ground_palette[rng.below(spec.ground_palette.size())];
    struct Wave {
        double fy, fx, phase, amp;
        Color tint;
    };
    std::vector<Wave> waves(3);
    for (auto& w : waves) {
        w.fy = rng.uniform(-3, 3) / H;
        w.fx = rng.uniform(-3, 3) / W;
        w.phase = rng.uniform(0, 2 * std::numbers::pi);
        w.amp = spec.texture_amplitude * rng.uniform(0.5, 1.0);
        for (double& t : w.tint) t = rng.uniform(0.8, 1.2);
    }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double* p = cv.px(y, x);
            const double grain = spec.grain_amplitude * rng.uniform(-1, 1);
            for (int c = 0; c < 3; ++c) {
                double v = ground[c] + grain;
                for (const auto& w : waves)
                    v += w.amp * w.tint[c] * std::sin(2 * std::numbers::pi * (w.fy * y + w.fx * x) + w.phase);
                p[c] = v;
            }
        }

    std::vector<std::uint8_t> stroke_hit(static_cast<std::size_t>(H) * W, 0);
    std::vector<int> stroke_color(stroke_hit.size(), -1);
    const int n_strokes = spec.strokes_min + static_cast<int>(rng.below(spec.strokes_max - spec.strokes_min + 1));
    for (int s = 0; s < n_strokes; ++s) {
        const int color = static_cast<int>(rng.below(spec.stroke_palette.size()));
        const double y0 = rng.uniform(0, H), x0 = rng.uniform(0, W);
        const double y2 = rng.uniform(0, H), x2 = rng.uniform(0, W);
        const double my = (y0 + y2) / 2, mx = (x0 + x2) / 2;
        const double len = std::hypot(y2 - y0, x2 - x0);
        const double bend = spec.curvature * len * rng.uniform(-1, 1);
        const double ny = len > 0 ? -(x2 - x0) / len : 0, nx = len > 0 ? (y2 - y0) / len : 0;
        const double width = scale * rng.uniform(spec.stroke_width_min, spec.stroke_width_max);
        std::vector<std::uint8_t> hit(stroke_hit.size(), 0);
        detail::raster_bezier(hit, H, W, {y0, x0, my + bend * ny, mx + bend * nx, y2, x2}, width / 2);
        for (std::size_t i = 0; i < hit.size(); ++i)
            if (hit[i]) stroke_hit[i] = 1, stroke_color[i] = color;
    }
    for (std::size_t i = 0; i < stroke_hit.size(); ++i)
        if (stroke_hit[i])
            for (int c = 0; c < 3; ++c) cv.rgb[i * 3 + c] = spec.stroke_palette[stroke_color[i]][c];

    std::vector<std::uint8_t> dmg(stroke_hit.size(), 0);
    const double target = rng.uniform(spec.damage_min + 0.05, spec.damage_max - 0.05);
    double size_scale = 1.0;
    for (int attempt = 0; detail::coverage(dmg) < target; ++attempt) {
        if (attempt > 0 && attempt % 50 == 0) size_scale *= 1.25;
        const auto shape = detail::damage_shape(rng, H, W, size_scale);
        std::vector<std::uint8_t> next = dmg;
        for (std::size_t i = 0; i < next.size(); ++i) next[i] |= shape[i];
        if (detail::coverage(next) > spec.damage_max) {
            size_scale *= 0.8;
            continue;
        }
        dmg = std::move(next);
    }

    std::vector<double> clean(cv.rgb.size());
    for (std::size_t i = 0; i < clean.size(); ++i) clean[i] = std::clamp(cv.rgb[i], 0.0, 1.0);
    std::vector<double> damaged = clean;
    for (std::size_t p = 0; p < dmg.size(); ++p) {
        if (!dmg[p]) continue;
        const double grain = spec.grain_amplitude * rng.uniform(-1, 1);
        for (int c = 0; c < 3; ++c) {
            double v = spec.plaster[c] + grain;
            if (stroke_hit[p])
                v = (1 - spec.residue_alpha) * v + spec.residue_alpha * spec.stroke_palette[stroke_color[p]][c];
            damaged[p * 3 + c] = std::clamp(v, 0.0, 1.0);
        }
    }
    return {Image(H, W, 3, std::move(clean)), ContourMask(H, W, std::move(dmg)), Image(H, W, 3, std::move(damaged)),
            ContourMask(H, W, std::move(stroke_hit))};
}

inline double mask_iou(const ContourMask& a, const ContourMask& b, const ContourMask* within = nullptr) {
    if (a.height() != b.height() || a.width() != b.width()) throw ShapeError("mask_iou: size mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (within && !within->data()[i]) continue;
        inter += a.data()[i] && b.data()[i];
        uni += a.data()[i] || b.data()[i];
    }
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

}  // namespace mural
