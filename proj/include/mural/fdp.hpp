// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mural/core/error.hpp"
#include "mural/fft.hpp"
#include "mural/image.hpp"

namespace mural {

inline constexpr double kMaxRadialFrequency = 0.70710678118654752440;  // sqrt(2)/2

// Radial gain curve: K knots evenly spaced over [0, sqrt(2)/2], linear in between.
class RadialFilter {
public:
    explicit RadialFilter(std::vector<double> gains) : gains_(std::move(gains)) {
        if (gains_.empty()) throw DomainError("RadialFilter: need at least one gain");
        for (double g : gains_)
            if (!(g > 0.0) || !std::isfinite(g)) throw DomainError("RadialFilter: gains must be positive and finite");
    }

    static RadialFilter identity(int K) {
        if (K < 1) throw DomainError("RadialFilter: K must be >= 1");
        return RadialFilter(std::vector<double>(K, 1.0));
    }

    int size() const { return static_cast<int>(gains_.size()); }
    const std::vector<double>& gains() const { return gains_; }

    // Weight of knot k at radius r (hat functions; they sum to 1 everywhere).
    static double basis(int K, int k, double r) {
        if (K == 1) return 1.0;
        const double step = kMaxRadialFrequency / (K - 1);
        const double pos = std::clamp(r / step, 0.0, static_cast<double>(K - 1));
        return std::max(0.0, 1.0 - std::abs(pos - k));
    }

    double gain(double r) const {
        const int K = size();
        if (K == 1) return gains_[0];
        const double pos = std::clamp(r / (kMaxRadialFrequency / (K - 1)), 0.0, static_cast<double>(K - 1));
        const int i = std::min(static_cast<int>(pos), K - 2);
        const double f = pos - i;
        return gains_[i] * (1.0 - f) + gains_[i + 1] * f;
    }

    std::string to_text() const {
        std::ostringstream o;
        o.precision(17);
        o << "# radial gains, low to high frequency\n";
        for (double g : gains_) o << g << "\n";
        return o.str();
    }

    static RadialFilter from_text(const std::string& text) {
        std::istringstream in(text);
        std::string line;
        std::vector<double> g;
        while (std::getline(in, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            std::istringstream ls(line);
            double v;
            while (ls >> v) g.push_back(v);
            if (!ls.eof()) throw FormatError("filter file: malformed value in '" + line + "'");
        }
        return RadialFilter(std::move(g));
    }

    void save(const std::filesystem::path& p) const {
        std::ofstream f(p);
        if (!f) throw IoError("cannot write filter " + p.string());
        f << to_text();
    }

    static RadialFilter load(const std::filesystem::path& p) {
        std::ifstream f(p);
        if (!f) throw IoError("cannot read filter " + p.string());
        std::stringstream ss;
        ss << f.rdbuf();
        return from_text(ss.str());
    }

private:
    std::vector<double> gains_;
};

// Distance of bin (u,v) from DC in cycles per pixel, using the centred
// (wrapped) frequency of each axis.
inline double radial_frequency(int u, int v, int h, int w) {
    const double fy = static_cast<double>(std::min(u, h - u)) / h;
    const double fx = static_cast<double>(std::min(v, w - v)) / w;
    return std::sqrt(fy * fy + fx * fx);
}

// Scales each spectrum bin by gain(r); no clamping.
template <class Gain>
std::vector<double> filter_plane(int h, int w, const std::vector<double>& plane, Gain&& gain) {
    fft::Plane f = fft::fft2(fft::from_real(h, w, plane));
    for (int u = 0; u < h; ++u)
        for (int v = 0; v < w; ++v) f(u, v) *= gain(radial_frequency(u, v, h, w));
    return fft::real_part(fft::ifft2(f));
}

inline std::vector<double> channel_plane(const Image& img, int c) {
    std::vector<double> v(img.pixel_count());
    for (std::size_t p = 0; p < v.size(); ++p) v[p] = img.data()[p * img.channels() + c];
    return v;
}

// Filtered values before the final clamp, interleaved like the input.
inline std::vector<double> apply_filter_raw(const Image& img, const RadialFilter& f) {
    const int H = img.height(), W = img.width(), C = img.channels();
    std::vector<double> out(img.size());
    for (int c = 0; c < C; ++c) {
        const auto plane = filter_plane(H, W, channel_plane(img, c), [&](double r) { return f.gain(r); });
        for (std::size_t p = 0; p < plane.size(); ++p) out[p * C + c] = plane[p];
    }
    return out;
}

inline Image apply_filter(const Image& img, const RadialFilter& f) {
    auto v = apply_filter_raw(img, f);
    for (double& x : v) x = std::clamp(x, 0.0, 1.0);
    return Image(img.shape(), std::move(v));
}

struct FilterFit {
    RadialFilter filter;
    std::vector<double> loss_trace;  // mean squared error, starting at the identity
};

// Least-squares gains by conjugate gradient with exact line search on the
// quadratic loss, started from the identity filter.
inline FilterFit fit_filter(const std::vector<std::pair<Image, Image>>& pairs, int K, int steps,
                            double min_gain = 1e-3) {
    if (pairs.empty()) throw DomainError("fit_filter: no training pairs");
    if (K < 1) throw DomainError("fit_filter: K must be >= 1");
    std::vector<double> G(static_cast<std::size_t>(K) * K, 0.0), b(K, 0.0);
    double c0 = 0.0, n = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& [gen, ref] = pairs[i];
        if (gen.shape() != ref.shape() || gen.shape() != pairs[0].first.shape())
            throw ShapeError("fit_filter: pair " + std::to_string(i) + " shapes differ");
        const int H = gen.height(), W = gen.width();
        for (int c = 0; c < gen.channels(); ++c) {
            const auto g = channel_plane(gen, c);
            const auto r = channel_plane(ref, c);
            std::vector<std::vector<double>> B(K);
            for (int k = 0; k < K; ++k)
                B[k] = filter_plane(H, W, g, [&](double rr) { return RadialFilter::basis(K, k, rr); });
            for (int a = 0; a < K; ++a) {
                for (int bb = a; bb < K; ++bb) {
                    double s = 0.0;
                    for (std::size_t p = 0; p < g.size(); ++p) s += B[a][p] * B[bb][p];
                    G[a * K + bb] += s;
                    if (bb != a) G[bb * K + a] += s;
                }
                double s = 0.0;
                for (std::size_t p = 0; p < g.size(); ++p) s += B[a][p] * r[p];
                b[a] += s;
            }
            for (double v : r) c0 += v * v;
            n += static_cast<double>(g.size());
        }
    }
    // loss(x) = (x'Gx - 2 b'x + c0) / n
    auto Gx = [&](const std::vector<double>& x) {
        std::vector<double> y(K, 0.0);
        for (int i = 0; i < K; ++i)
            for (int j = 0; j < K; ++j) y[i] += G[i * K + j] * x[j];
        return y;
    };
    auto dot = [](const std::vector<double>& u, const std::vector<double>& v) {
        double s = 0.0;
        for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
        return s;
    };
    auto loss = [&](const std::vector<double>& x) { return (dot(x, Gx(x)) - 2.0 * dot(b, x) + c0) / n; };

    std::vector<double> x(K, 1.0);
    FilterFit fit{RadialFilter::identity(K), {loss(x)}};
    std::vector<double> r(K), d(K);
    {
        const auto gx = Gx(x);
        for (int i = 0; i < K; ++i) r[i] = b[i] - gx[i];  // negative half-gradient
    }
    d = r;
    double rr = dot(r, r);
    const double tol = 1e-30 * std::max(1.0, dot(b, b));
    for (int it = 0; it < steps && rr > tol; ++it) {
        const auto Gd = Gx(d);
        const double curv = dot(d, Gd);
        if (!(curv > 0.0)) break;
        const double step = rr / curv;
        for (int i = 0; i < K; ++i) {
            x[i] += step * d[i];
            r[i] -= step * Gd[i];
        }
        const double rr_new = dot(r, r);
        for (int i = 0; i < K; ++i) d[i] = r[i] + (rr_new / rr) * d[i];
        rr = rr_new;
        fit.loss_trace.push_back(loss(x));
    }
    for (double& g : x) g = std::max(g, min_gain);
    fit.filter = RadialFilter(x);
    return fit;
}

}  // namespace mural
