// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "mural/core/error.hpp"

namespace mural::fft {

using cd = std::complex<double>;

// Complex plane, row-major.
struct Plane {
    int height = 0, width = 0;
    std::vector<cd> data;

    Plane() = default;
    Plane(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w) {}
    cd& operator()(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    const cd& operator()(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

namespace detail {

inline int smallest_factor(int n) {
    for (int p = 2; p * p <= n; ++p)
        if (n % p == 0) return p;
    return n;
}

// Mixed-radix decimation in time on a strided input. Prime lengths fall back
// to the direct sum. sign = -1 forward, +1 inverse (unnormalized).
inline void transform(const cd* in, std::size_t stride, int n, cd* out, int sign) {
    if (n == 1) {
        out[0] = in[0];
        return;
    }
    const int p = smallest_factor(n);
    const double tau = sign * 2.0 * std::numbers::pi;
    if (p == n) {
        for (int k = 0; k < n; ++k) {
            cd s = 0.0;
            for (int j = 0; j < n; ++j) s += in[j * stride] * std::polar(1.0, tau * ((static_cast<long long>(j) * k) % n) / n);
            out[k] = s;
        }
        return;
    }
    const int m = n / p;
    // Sub-transforms of the p decimated sequences land in out[r*m .. r*m+m).
    for (int r = 0; r < p; ++r) transform(in + r * stride, stride * p, m, out + r * m, sign);
    std::vector<cd> tmp(p);
    std::vector<cd> scratch(n);
    for (int k = 0; k < m; ++k) {
        for (int r = 0; r < p; ++r) tmp[r] = out[r * m + k] * std::polar(1.0, tau * r * k / n);
        for (int q = 0; q < p; ++q) {
            cd s = 0.0;
            for (int r = 0; r < p; ++r) s += tmp[r] * std::polar(1.0, tau * ((r * q) % p) / p);
            scratch[q * m + k] = s;
        }
    }
    std::copy(scratch.begin(), scratch.end(), out);
}

}  // namespace detail

inline std::vector<cd> dft1(const std::vector<cd>& x, bool inverse = false) {
    if (x.empty()) throw DomainError("fft: length must be >= 1");
    std::vector<cd> out(x.size());
    detail::transform(x.data(), 1, static_cast<int>(x.size()), out.data(), inverse ? 1 : -1);
    if (inverse)
        for (auto& v : out) v /= static_cast<double>(x.size());
    return out;
}

// Unnormalized forward transform; the inverse carries the 1/(h*w).
inline Plane fft2(const Plane& in, bool inverse = false) {
    if (in.height < 1 || in.width < 1) throw DomainError("fft2: dimensions must be >= 1");
    for (const auto& v : in.data)
        if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) throw NonFiniteError("fft2: non-finite input");
    const int sign = inverse ? 1 : -1;
    Plane rows(in.height, in.width);
    for (int y = 0; y < in.height; ++y)
        detail::transform(&in.data[static_cast<std::size_t>(y) * in.width], 1, in.width,
                          &rows.data[static_cast<std::size_t>(y) * in.width], sign);
    Plane out(in.height, in.width);
    std::vector<cd> col(in.height);
    for (int x = 0; x < in.width; ++x) {
        detail::transform(&rows.data[x], static_cast<std::size_t>(in.width), in.height, col.data(), sign);
        for (int y = 0; y < in.height; ++y) out(y, x) = col[y];
    }
    if (inverse) {
        const double s = 1.0 / (static_cast<double>(in.height) * in.width);
        for (auto& v : out.data) v *= s;
    }
    return out;
}

inline Plane ifft2(const Plane& in) { return fft2(in, true); }

inline Plane from_real(int h, int w, const std::vector<double>& v) {
    if (v.size() != static_cast<std::size_t>(h) * w) throw ShapeError("fft: plane size mismatch");
    Plane p(h, w);
    for (std::size_t i = 0; i < v.size(); ++i) p.data[i] = v[i];
    return p;
}

inline std::vector<double> real_part(const Plane& p) {
    std::vector<double> v(p.data.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = p.data[i].real();
    return v;
}

// O(n^2) reference transform.
inline Plane direct_dft2(const Plane& in) {
    Plane out(in.height, in.width);
    for (int u = 0; u < in.height; ++u)
        for (int v = 0; v < in.width; ++v) {
            cd s = 0.0;
            for (int y = 0; y < in.height; ++y)
                for (int x = 0; x < in.width; ++x)
                    s += in(y, x) * std::polar(1.0, -2.0 * std::numbers::pi *
                                                        (static_cast<double>(u * y) / in.height +
                                                         static_cast<double>(v * x) / in.width));
            out(u, v) = s;
        }
    return out;
}

}  // namespace mural::fft
