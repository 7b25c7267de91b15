// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mural/core/error.hpp"
#include "mural/core/rng.hpp"
#include "mural/image.hpp"

namespace mural {

//
// K-means (Lloyd) over arbitrary-dimension points
//

struct KMeansOptions {
    int k = 2;
    std::uint64_t seed = 0;
    int max_iter = 100;
    double tol = 1e-6;  // stop when no centroid moves farther than this
    int restarts = 8;   // independent seedings; the lowest objective wins
};

struct KMeansResult {
    int dim = 0;
    std::vector<double> centroids;   // k x dim
    std::vector<int> assignments;    // one cluster index per point
    std::vector<double> objective_trace;  // J after every centroid update
    double objective = 0.0;
    int iterations = 0;

    int k() const { return dim == 0 ? 0 : static_cast<int>(centroids.size()) / dim; }
    std::span<const double> centroid(int c) const {
        return std::span<const double>(centroids).subspan(static_cast<std::size_t>(c) * dim, dim);
    }
};

namespace detail {

inline double sq_dist(const double* a, const double* b, int dim) {
    double s = 0.0;
    for (int d = 0; d < dim; ++d) {
        const double diff = a[d] - b[d];
        s += diff * diff;
    }
    return s;
}

inline bool lex_less(const double* a, const double* b, int dim) {
    return std::lexicographical_compare(a, a + dim, b, b + dim);
}

// Indices of one representative per distinct point, in lexicographic order of value.
inline std::vector<std::size_t> distinct_points(std::span<const double> pts, int dim) {
    const std::size_t n = pts.size() / dim;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const double* base = pts.data();
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return lex_less(base + a * dim, base + b * dim, dim); });
    std::vector<std::size_t> uniq;
    for (std::size_t i : order)
        if (uniq.empty() || lex_less(base + uniq.back() * dim, base + i * dim, dim)) uniq.push_back(i);
    return uniq;
}

// Point farthest from its nearest centroid; ties resolved by the smallest value,
// which keeps the choice independent of the input order.
inline std::size_t farthest_point(std::span<const double> pts, int dim, const std::vector<std::size_t>& candidates,
                                  const std::vector<double>& centroids, int used) {
    const double* base = pts.data();
    std::size_t best = candidates.front();
    double best_d = -1.0;
    for (std::size_t idx : candidates) {
        double dmin = std::numeric_limits<double>::infinity();
        for (int c = 0; c < used; ++c) dmin = std::min(dmin, sq_dist(base + idx * dim, &centroids[c * dim], dim));
        if (dmin > best_d) {
            best_d = dmin;
            best = idx;
        }
    }
    return best;
}

inline KMeansResult lloyd(std::span<const double> pts, int dim, std::vector<double> centroids, int k, int max_iter,
                          double tol) {
    const std::size_t n = pts.size() / dim;
    const double* base = pts.data();
    KMeansResult r;
    r.dim = dim;
    r.assignments.assign(n, -1);
    std::vector<double> sums(static_cast<std::size_t>(k) * dim);
    std::vector<std::size_t> counts(k);
    for (int it = 0; it < max_iter; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double best_d = sq_dist(base + i * dim, &centroids[0], dim);
            for (int c = 1; c < k; ++c) {
                const double d = sq_dist(base + i * dim, &centroids[c * dim], dim);
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (r.assignments[i] != best) {
                r.assignments[i] = best;
                changed = true;
            }
        }
        // empty clusters are reseeded at the point farthest from its own centroid
        std::fill(counts.begin(), counts.end(), 0);
        for (int a : r.assignments) ++counts[a];
        for (int c = 0; c < k; ++c) {
            if (counts[c] != 0) continue;
            std::size_t far = 0;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (counts[r.assignments[i]] <= 1) continue;
                const double d = sq_dist(base + i * dim, &centroids[r.assignments[i] * dim], dim);
                if (d > far_d || (d == far_d && lex_less(base + i * dim, base + far * dim, dim))) {
                    far_d = d;
                    far = i;
                }
            }
            --counts[r.assignments[far]];
            r.assignments[far] = c;
            ++counts[c];
            changed = true;
        }
        std::fill(sums.begin(), sums.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (int d = 0; d < dim; ++d) sums[r.assignments[i] * dim + d] += base[i * dim + d];
        double moved = 0.0;
        for (int c = 0; c < k; ++c) {
            double m2 = 0.0;
            for (int d = 0; d < dim; ++d) {
                const double v = sums[c * dim + d] / static_cast<double>(counts[c]);
                m2 += (v - centroids[c * dim + d]) * (v - centroids[c * dim + d]);
                centroids[c * dim + d] = v;
            }
            moved = std::max(moved, std::sqrt(m2));
        }
        double J = 0.0;
        for (std::size_t i = 0; i < n; ++i) J += sq_dist(base + i * dim, &centroids[r.assignments[i] * dim], dim);
        r.objective_trace.push_back(J);
        r.iterations = it + 1;
        if (!changed || moved < tol) break;
    }
    r.centroids = std::move(centroids);
    r.objective = r.objective_trace.back();
    return r;
}

}  // namespace detail

// Minimises J = sum_i sum_k r_ik |x_i - mu_k|^2. `points` is n x dim, row-major.
// Seeding is farthest-point: the seed picks the first centre among the distinct
// values, the rest are chosen greedily by distance.
inline KMeansResult kmeans(std::span<const double> points, int dim, const KMeansOptions& opt = {}) {
    if (dim < 1) throw DomainError("kmeans: dimension must be >= 1");
    if (points.empty()) throw DomainError("kmeans: empty point set");
    if (points.size() % dim != 0) throw ShapeError("kmeans: point buffer is not a multiple of the dimension");
    if (opt.k < 1) throw DomainError("kmeans: K must be >= 1");
    if (opt.max_iter < 1) throw DomainError("kmeans: max_iter must be >= 1");
    if (!(opt.tol >= 0.0)) throw DomainError("kmeans: tol must be nonnegative");
    for (double v : points)
        if (!std::isfinite(v)) throw NonFiniteError("kmeans: non-finite coordinate");

    const auto distinct = detail::distinct_points(points, dim);
    if (static_cast<std::size_t>(opt.k) > distinct.size())
        throw DegenerateInputError("kmeans: K=" + std::to_string(opt.k) + " exceeds the " +
                                   std::to_string(distinct.size()) + " distinct points");

    Rng rng(opt.seed);
    const std::size_t offset = rng.below(distinct.size());
    const int restarts = std::max(1, std::min<int>(opt.restarts, static_cast<int>(distinct.size())));
    std::optional<KMeansResult> best;
    for (int r = 0; r < restarts; ++r) {
        std::vector<double> centroids(static_cast<std::size_t>(opt.k) * dim);
        const std::size_t first = distinct[(offset + r) % distinct.size()];
        std::copy_n(points.data() + first * dim, dim, centroids.begin());
        for (int c = 1; c < opt.k; ++c) {
            const std::size_t idx = detail::farthest_point(points, dim, distinct, centroids, c);
            std::copy_n(points.data() + idx * dim, dim, centroids.begin() + static_cast<std::ptrdiff_t>(c) * dim);
        }
        KMeansResult res = detail::lloyd(points, dim, std::move(centroids), opt.k, opt.max_iter, opt.tol);
        if (!best || res.objective < best->objective) best = std::move(res);
    }
    return std::move(*best);
}

//
// Contour extraction
//

// Binary h x w map; 1 marks a contour stroke.
class ContourMask {
public:
    ContourMask() = default;
    ContourMask(int height, int width) : height_(height), width_(width) {
        if (height < 1 || width < 1) throw DomainError("ContourMask: dimensions must be >= 1");
        data_.assign(static_cast<std::size_t>(height) * width, 0);
    }
    ContourMask(int height, int width, std::vector<std::uint8_t> data)
        : height_(height), width_(width), data_(std::move(data)) {
        if (height < 1 || width < 1) throw DomainError("ContourMask: dimensions must be >= 1");
        if (data_.size() != static_cast<std::size_t>(height) * width)
            throw ShapeError("ContourMask: data length does not match shape");
        for (auto v : data_)
            if (v > 1) throw DomainError("ContourMask: values must be 0 or 1");
    }

    // Any nonzero intensity counts as foreground.
    static ContourMask from_image(const Image& img, double threshold = 0.5) {
        const Image g = to_grayscale(img);
        std::vector<std::uint8_t> d(g.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = g.data()[i] >= threshold ? 1 : 0;
        return ContourMask(g.height(), g.width(), std::move(d));
    }

    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t size() const { return data_.size(); }
    std::uint8_t operator()(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    std::span<const std::uint8_t> data() const { return data_; }
    std::size_t count() const { return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), 1)); }
    double fraction() const { return data_.empty() ? 0.0 : static_cast<double>(count()) / data_.size(); }
    bool same_shape(int h, int w) const { return h == height_ && w == width_; }

    // 1 -> 1.0, 0 -> 0.0, single channel.
    Image to_image() const {
        std::vector<double> v(data_.begin(), data_.end());
        return Image(height_, width_, 1, std::move(v));
    }

    ContourMask resized(int h, int w) const { return from_image(resample(to_image(), h, w, ResampleMode::nearest)); }

    ContourMask operator|(const ContourMask& o) const {
        if (!o.same_shape(height_, width_)) throw ShapeError("ContourMask: union of different shapes");
        std::vector<std::uint8_t> d(data_.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = data_[i] | o.data_[i];
        return ContourMask(height_, width_, std::move(d));
    }
    ContourMask operator~() const {
        std::vector<std::uint8_t> d(data_.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = data_[i] ? 0 : 1;
        return ContourMask(height_, width_, std::move(d));
    }

    bool operator==(const ContourMask&) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> data_;
};

struct ContourOptions {
    std::uint64_t seed = 0;
    bool invert = false;             // choose the lighter cluster as foreground
    bool allow_degenerate = false;   // constant input yields an all-zero mask instead of an error
    const ContourMask* region = nullptr;  // cluster only these pixels; others stay 0
    int max_iter = 100;
    double tol = 1e-6;
};

struct ContourResult {
    ContourMask mask;
    double dark_luminance = 0.0;   // luminance of the darker centroid
    double light_luminance = 0.0;
    bool degenerate = false;
    // Luminance separating the two clusters; the reward proxy uses it.
    double threshold() const { return 0.5 * (dark_luminance + light_luminance); }
};

// Two-cluster K-means over the colour vectors of every pixel. The cluster whose
// centroid has the lower luminance becomes the foreground (or the higher one
// with `invert`); equal luminances go to the smaller cluster.
inline ContourResult extract_contour(const Image& img, const ContourOptions& opt = {}) {
    if (img.empty()) throw DomainError("extract_contour: empty image");
    if (opt.region && !opt.region->same_shape(img.height(), img.width()))
        throw ShapeError("extract_contour: region mask shape differs from image");
    const int dim = img.channels();
    std::vector<double> pts;
    std::vector<std::size_t> where;
    pts.reserve(img.size());
    for (std::size_t p = 0; p < img.pixel_count(); ++p) {
        if (opt.region && !opt.region->data()[p]) continue;
        where.push_back(p);
        for (int c = 0; c < dim; ++c) pts.push_back(img.data()[p * dim + c]);
    }
    ContourResult out{ContourMask(img.height(), img.width())};
    auto degenerate = [&](const std::string& why) {
        if (!opt.allow_degenerate) throw DegenerateInputError("extract_contour: " + why);
        out.degenerate = true;
        return out;
    };
    if (where.empty()) return degenerate("no pixels to cluster");
    if (detail::distinct_points(pts, dim).size() < 2) return degenerate("image has a single distinct colour");

    const KMeansResult km = kmeans(pts, dim, {.k = 2, .seed = opt.seed, .max_iter = opt.max_iter, .tol = opt.tol});
    auto lum = [&](int c) {
        auto m = km.centroid(c);
        return dim == 3 ? luminance(m[0], m[1], m[2]) : m[0];
    };
    std::size_t count[2] = {0, 0};
    for (int a : km.assignments) ++count[a];
    const double l0 = lum(0), l1 = lum(1);
    int fg;
    if (l0 == l1)
        fg = count[1] < count[0] ? 1 : 0;
    else
        fg = (l0 < l1) != opt.invert ? 0 : 1;
    out.dark_luminance = std::min(l0, l1);
    out.light_luminance = std::max(l0, l1);
    std::vector<std::uint8_t> d(img.pixel_count(), 0);
    for (std::size_t i = 0; i < where.size(); ++i) d[where[i]] = km.assignments[i] == fg ? 1 : 0;
    out.mask = ContourMask(img.height(), img.width(), std::move(d));
    return out;
}

// Clusters the intact and damaged parts separately and unions the strokes found
// in each; faint residue inside a damaged region would otherwise be swamped by
// the full-contrast strokes of the intact area.
inline ContourMask extract_contour_by_region(const Image& img, const ContourMask& damage, std::uint64_t seed) {
    const ContourMask intact = ~damage;
    ContourOptions opt;
    opt.seed = seed;
    opt.allow_degenerate = true;
    opt.region = &intact;
    const ContourMask a = extract_contour(img, opt).mask;
    opt.region = &damage;
    const ContourMask b = extract_contour(img, opt).mask;
    return a | b;
}

}  // namespace mural
