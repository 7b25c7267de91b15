// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mural/contour.hpp"
#include "mural/core/error.hpp"
#include "mural/image.hpp"

namespace mural {

struct SsimParams {
    int window = 11;
    double sigma = 1.5;
    double c1 = 1e-4;  // (0.01)^2
    double c2 = 9e-4;  // (0.03)^2
};

namespace detail {

inline void require_same(const Image& a, const Image& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

inline void require_mask(const ContourMask* m, const Image& img, const char* what) {
    if (m && !m->same_shape(img.height(), img.width()))
        throw ShapeError(std::string(what) + ": mask does not match image size");
    if (m && m->count() == 0) throw DegenerateInputError(std::string(what) + ": empty region mask");
}

inline std::vector<double> gaussian_window(int n, double sigma) {
    std::vector<double> w(static_cast<std::size_t>(n) * n);
    const double c = (n - 1) / 2.0;
    double s = 0.0;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            s += (w[static_cast<std::size_t>(y) * n + x] =
                      std::exp(-((y - c) * (y - c) + (x - c) * (x - c)) / (2.0 * sigma * sigma)));
    for (double& v : w) v /= s;
    return w;
}

}  // namespace detail

// Mean SSIM over all fully contained Gaussian windows of the grayscale images.
// With a mask, only windows centred on masked pixels count; if none exist,
// windows touching the mask are used.
inline double ssim(const Image& x, const Image& y, const SsimParams& prm = {}, const ContourMask* mask = nullptr) {
    detail::require_same(x, y, "ssim");
    detail::require_mask(mask, x, "ssim");
    if (prm.window < 1 || prm.window % 2 == 0) throw DomainError("ssim: window must be odd and >= 1");
    const Image a = to_grayscale(x), b = to_grayscale(y);
    const int H = a.height(), W = a.width(), n = prm.window, r = n / 2;
    if (H < n || W < n)
        throw DomainError("ssim: image " + std::to_string(H) + "x" + std::to_string(W) + " smaller than " +
                          std::to_string(n) + "x" + std::to_string(n) + " window");
    const auto w = detail::gaussian_window(n, prm.sigma);
    auto window_value = [&](int cy, int cx) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int dy = 0; dy < n; ++dy)
            for (int dx = 0; dx < n; ++dx) {
                const double wt = w[static_cast<std::size_t>(dy) * n + dx];
                const double u = a(cy - r + dy, cx - r + dx, 0), v = b(cy - r + dy, cx - r + dx, 0);
                mx += wt * u;
                my += wt * v;
                sxx += wt * u * u;
                syy += wt * v * v;
                sxy += wt * u * v;
            }
        const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
        return ((2 * mx * my + prm.c1) * (2 * cxy + prm.c2)) / ((mx * mx + my * my + prm.c1) * (vx + vy + prm.c2));
    };
    auto touches = [&](int cy, int cx) {
        for (int yy = cy - r; yy <= cy + r; ++yy)
            for (int xx = cx - r; xx <= cx + r; ++xx)
                if ((*mask)(yy, xx)) return true;
        return false;
    };
    for (int pass = 0; pass < 2; ++pass) {
        double sum = 0.0;
        std::size_t count = 0;
        for (int cy = r; cy < H - r; ++cy)
            for (int cx = r; cx < W - r; ++cx) {
                if (mask && (pass == 0 ? !(*mask)(cy, cx) : !touches(cy, cx))) continue;
                sum += window_value(cy, cx);
                ++count;
            }
        if (count) return sum / static_cast<double>(count);
        if (!mask) break;
    }
    throw DegenerateInputError("ssim: no window overlaps the mask");
}

struct Histogram {
    std::vector<double> counts;
    double lo = 0.0, hi = 1.0;

    double total() const {
        double s = 0.0;
        for (double c : counts) s += c;
        return s;
    }
    Histogram normalized() const {
        Histogram h = *this;
        const double t = total();
        if (t > 0)
            for (double& c : h.counts) c /= t;
        return h;
    }
};

inline double chi_square(const Histogram& h1, const Histogram& h2) {
    if (h1.counts.size() != h2.counts.size() || h1.lo != h2.lo || h1.hi != h2.hi)
        throw ShapeError("chi_square: histograms use different binning");
    double s = 0.0;
    for (std::size_t i = 0; i < h1.counts.size(); ++i) {
        const double d = h1.counts[i] - h2.counts[i], t = h1.counts[i] + h2.counts[i];
        if (t > 0) s += d * d / t;
    }
    return s;
}

struct Consistency {
    double chi2 = 0.0;
    double similarity = 1.0;  // 1 / (1 + chi2)
};

inline Consistency make_consistency(double chi2) { return {chi2, 1.0 / (1.0 + chi2)}; }

inline Histogram color_histogram(const Image& img, int channel, int bins, const ContourMask* mask = nullptr) {
    if (bins < 1) throw DomainError("color_histogram: bins must be >= 1");
    Histogram h{std::vector<double>(bins, 0.0), 0.0, 1.0};
    const int C = img.channels();
    for (std::size_t p = 0; p < img.pixel_count(); ++p) {
        if (mask && !mask->data()[p]) continue;
        const double v = img.data()[p * C + channel];
        h.counts[std::min(bins - 1, static_cast<int>(v * bins))] += 1.0;
    }
    return h;
}

struct HistogramParams {
    int bins = 32;
    bool normalize = true;  // compare unit-mass histograms
};

// Colour consistency: per-channel chi-square averaged over channels.
inline Consistency ccon(const Image& repaired, const Image& reference, const HistogramParams& prm = {},
                        const ContourMask* mask = nullptr) {
    detail::require_same(repaired, reference, "ccon");
    detail::require_mask(mask, repaired, "ccon");
    double s = 0.0;
    for (int c = 0; c < repaired.channels(); ++c) {
        Histogram a = color_histogram(repaired, c, prm.bins, mask), b = color_histogram(reference, c, prm.bins, mask);
        if (prm.normalize) a = a.normalized(), b = b.normalized();
        s += chi_square(a, b);
    }
    return make_consistency(s / repaired.channels());
}

// 8-neighbour radius-1 codes, bit i set when neighbour i >= centre; neighbours
// run clockwise from east: E, SE, S, SW, W, NW, N, NE.
inline constexpr std::array<std::array<int, 2>, 8> kLbpOffsets = {
    {{0, 1}, {1, 1}, {1, 0}, {1, -1}, {0, -1}, {-1, -1}, {-1, 0}, {-1, 1}}};

inline std::uint8_t lbp_code(const Image& g, int y, int x) {
    const double c = g(y, x, 0);
    std::uint8_t code = 0;
    for (int i = 0; i < 8; ++i)
        if (g(y + kLbpOffsets[i][0], x + kLbpOffsets[i][1], 0) >= c) code |= static_cast<std::uint8_t>(1u << i);
    return code;
}

inline Histogram lbp_histogram(const Image& region, const ContourMask* mask = nullptr) {
    const Image g = to_grayscale(region);
    if (g.height() < 3 || g.width() < 3) throw DomainError("lbp_histogram: region must be at least 3x3");
    Histogram h{std::vector<double>(256, 0.0), 0.0, 256.0};
    for (int y = 1; y + 1 < g.height(); ++y)
        for (int x = 1; x + 1 < g.width(); ++x) {
            if (mask && !(*mask)(y, x)) continue;
            h.counts[lbp_code(g, y, x)] += 1.0;
        }
    return h;
}

inline Consistency tcon(const Image& repaired, const Image& reference, bool normalize = true,
                        const ContourMask* mask = nullptr) {
    detail::require_same(repaired, reference, "tcon");
    detail::require_mask(mask, repaired, "tcon");
    Histogram a = lbp_histogram(repaired, mask), b = lbp_histogram(reference, mask);
    if (a.total() == 0) throw DegenerateInputError("tcon: mask covers no interior pixel");
    if (normalize) a = a.normalized(), b = b.normalized();
    return make_consistency(chi_square(a, b));
}

struct Gradient {
    int height = 0, width = 0;
    std::vector<double> gx, gy;
    double magnitude(std::size_t i) const { return std::hypot(gx[i], gy[i]); }
};

// 3x3 Sobel on a single-channel plane with replicated borders.
inline Gradient sobel(const std::vector<double>& plane, int H, int W) {
    Gradient g{H, W, std::vector<double>(plane.size()), std::vector<double>(plane.size())};
    auto at = [&](int y, int x) {
        y = std::clamp(y, 0, H - 1);
        x = std::clamp(x, 0, W - 1);
        return plane[static_cast<std::size_t>(y) * W + x];
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * W + x;
            g.gx[i] = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                      (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
            g.gy[i] = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                      (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
        }
    return g;
}

inline std::vector<double> edge_map(const Image& img) {
    const Image g = to_grayscale(img);
    const Gradient gr = sobel(g.values(), g.height(), g.width());
    std::vector<double> e(g.size());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = gr.magnitude(i);
    return e;
}

enum class EconMode {
    edge_gradient,  // compare Sobel gradients of the edge maps
    edge_map,       // compare the edge maps themselves
};

// sum |dE_rep - dE_orig| / sum |dE_orig|; lower is better.
inline double econ(const Image& repaired, const Image& original, EconMode mode = EconMode::edge_gradient,
                   const ContourMask* mask = nullptr) {
    detail::require_same(repaired, original, "econ");
    detail::require_mask(mask, repaired, "econ");
    const int H = repaired.height(), W = repaired.width();
    const auto er = edge_map(repaired), eo = edge_map(original);
    double num = 0.0, den = 0.0;
    if (mode == EconMode::edge_map) {
        for (std::size_t i = 0; i < er.size(); ++i) {
            if (mask && !mask->data()[i]) continue;
            num += std::abs(er[i] - eo[i]);
            den += std::abs(eo[i]);
        }
    } else {
        const Gradient gr = sobel(er, H, W), go = sobel(eo, H, W);
        for (std::size_t i = 0; i < er.size(); ++i) {
            if (mask && !mask->data()[i]) continue;
            num += std::hypot(gr.gx[i] - go.gx[i], gr.gy[i] - go.gy[i]);
            den += go.magnitude(i);
        }
    }
    if (!(den > 0.0)) throw DegenerateInputError("econ: original has no edges in the evaluated region");
    return num / den;
}

struct MetricParams {
    SsimParams ssim;
    HistogramParams color;
    bool normalize_lbp = true;
    EconMode econ_mode = EconMode::edge_gradient;
};

struct MetricReport {
    double ssim = 0.0;
    Consistency ccon;
    Consistency tcon;
    double econ = 0.0;
    bool masked = false;
};

inline MetricReport evaluate(const Image& repaired, const Image& reference, const MetricParams& prm = {},
                             const ContourMask* mask = nullptr) {
    MetricReport r;
    r.ssim = ssim(repaired, reference, prm.ssim, mask);
    r.ccon = ccon(repaired, reference, prm.color, mask);
    r.tcon = tcon(repaired, reference, prm.normalize_lbp, mask);
    r.econ = econ(repaired, reference, prm.econ_mode, mask);
    r.masked = mask != nullptr;
    return r;
}

// Baseline restorer: missing pixels take the per-channel mean of known pixels.
inline Image mean_fill(const Image& damaged, const ContourMask& missing) {
    if (!missing.same_shape(damaged.height(), damaged.width())) throw ShapeError("mean_fill: mask size mismatch");
    const int C = damaged.channels();
    std::vector<double> sum(C, 0.0);
    std::size_t n = 0;
    for (std::size_t p = 0; p < damaged.pixel_count(); ++p) {
        if (missing.data()[p]) continue;
        for (int c = 0; c < C; ++c) sum[c] += damaged.data()[p * C + c];
        ++n;
    }
    if (n == 0) throw DegenerateInputError("mean_fill: no known pixels");
    std::vector<double> v(damaged.values());
    for (std::size_t p = 0; p < damaged.pixel_count(); ++p)
        if (missing.data()[p])
            for (int c = 0; c < C; ++c) v[p * C + c] = sum[c] / static_cast<double>(n);
    return Image(damaged.shape(), std::move(v));
}

}  // namespace mural
