// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "mural/core/error.hpp"
#include "mural/nn/tensor.hpp"

namespace mural::nn {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Every op appends a node holding its value and, when
// recording, a closure that pushes the node's gradient to its inputs.
class Tape {
public:
    explicit Tape(bool record = true) : record_(record) {}

    bool recording() const { return record_; }

    Var constant(Tensor value) { return push(std::move(value), false, {}); }
    Var leaf(Tensor value, bool requires_grad = true) { return push(std::move(value), requires_grad, {}); }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    // Gradient from the last backward() (zeros if v was not reached).
    Tensor grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        return n.grad.data.empty() ? Tensor::zeros_like(n.value) : n.grad;
    }

    // Id the next pushed node will receive; lets an op's closure name its output.
    int next_id() const { return static_cast<int>(nodes_.size()); }

    Tensor& grad_mut(int id) {
        Node& n = nodes_[id];
        if (n.grad.data.empty()) n.grad = Tensor::zeros_like(n.value);
        return n.grad;
    }
    const Tensor& out_grad(int id) const { return nodes_[id].grad; }
    const Tensor& value_of(int id) const { return nodes_[id].value; }
    bool wants_grad(int id) const { return nodes_[id].requires_grad; }

    Var push(Tensor value, bool requires_grad, std::function<void()> backward) {
        const bool rg = requires_grad && record_;
        nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(backward) : nullptr});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void backward(Var loss) {
        if (!record_) throw Error("Tape::backward on a non-recording tape");
        if (value(loss).size() != 1) throw ShapeError("Tape::backward: target must be a scalar");
        for (auto& n : nodes_) n.grad = Tensor();
        grad_mut(loss.id).data[0] = 1.0;
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.backward && !n.grad.data.empty()) n.backward();
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void()> backward;
    };
    bool record_;
    std::vector<Node> nodes_;
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace detail {

inline bool any_grad(const Tape& tape, std::initializer_list<Var> vs) {
    if (!tape.recording()) return false;
    for (Var v : vs)
        if (tape.requires_grad(v)) return true;
    return false;
}

inline void expect_rank(const Tensor& t, int r, const char* op) {
    if (t.rank() != r)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + t.shape_str());
}

inline void expect_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape) throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

// [C,H,W] -> [C*k*k, H*W] with zero padding.
inline void im2col(const Tensor& x, int k, std::vector<double>& col) {
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2), p = k / 2;
    const std::size_t HW = static_cast<std::size_t>(H) * W;
    col.assign(static_cast<std::size_t>(C) * k * k * HW, 0.0);
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                double* dst = &col[((static_cast<std::size_t>(c) * k + ky) * k + kx) * HW];
                const int dy = ky - p, dx = kx - p;
                const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
                for (int y = std::max(0, -dy); y < std::min(H, H - dy); ++y) {
                    const double* src = &x.data[(static_cast<std::size_t>(c) * H + y + dy) * W + dx];
                    double* row = dst + static_cast<std::size_t>(y) * W;
                    for (int xx = x0; xx < x1; ++xx) row[xx] = src[xx];
                }
            }
}

inline void col2im_add(const std::vector<double>& col, int C, int H, int W, int k, Tensor& dx) {
    const int p = k / 2;
    const std::size_t HW = static_cast<std::size_t>(H) * W;
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const double* src = &col[((static_cast<std::size_t>(c) * k + ky) * k + kx) * HW];
                const int dy = ky - p, dxo = kx - p;
                const int x0 = std::max(0, -dxo), x1 = std::min(W, W - dxo);
                for (int y = std::max(0, -dy); y < std::min(H, H - dy); ++y) {
                    double* dst = &dx.data[(static_cast<std::size_t>(c) * H + y + dy) * W + dxo];
                    const double* row = src + static_cast<std::size_t>(y) * W;
                    for (int xx = x0; xx < x1; ++xx) dst[xx] += row[xx];
                }
            }
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline void accumulate(Tape& tape, Var v, const Tensor& g) {
    if (!tape.wants_grad(v.id)) return;
    Tensor& dst = tape.grad_mut(v.id);
    for (std::size_t i = 0; i < g.size(); ++i) dst.data[i] += g.data[i];
}

}  // namespace detail

// Same-padded 2-D convolution with an odd square kernel.
// x: [Ci,H,W], w: [Co,Ci,k,k], b: [Co] -> [Co,H,W]
inline Var conv2d(Tape& tape, Var x, Var w, Var b) {
    const Tensor& X = tape.value(x);
    const Tensor& Wt = tape.value(w);
    detail::expect_rank(X, 3, "conv2d");
    detail::expect_rank(Wt, 4, "conv2d");
    const int Ci = X.dim(0), H = X.dim(1), Wd = X.dim(2), Co = Wt.dim(0), k = Wt.dim(2);
    if (Wt.dim(1) != Ci || Wt.dim(3) != k || k % 2 == 0)
        throw ShapeError("conv2d: kernel " + Wt.shape_str() + " incompatible with input " + X.shape_str());
    if (tape.value(b).size() != static_cast<std::size_t>(Co)) throw ShapeError("conv2d: bias length mismatch");
    const int K = Ci * k * k;
    const int HW = H * Wd;
    std::vector<double> col;
    detail::im2col(X, k, col);
    Tensor out({Co, H, Wd});
    MapMat O(out.data.data(), Co, HW);
    O.noalias() = CMapMat(Wt.data.data(), Co, K) * CMapMat(col.data(), K, HW);
    const Tensor& B = tape.value(b);
    for (int co = 0; co < Co; ++co) O.row(co).array() += B.data[co];
    const bool rg = detail::any_grad(tape, {x, w, b});
    const int yid = tape.next_id();
    return tape.push(std::move(out), rg, [&tape, x, w, b, yid, Ci, H, Wd, Co, k, K, HW] {
        const Tensor& G = tape.out_grad(yid);
        CMapMat Gm(G.data.data(), Co, HW);
        if (tape.wants_grad(b.id)) {
            Tensor& db = tape.grad_mut(b.id);
            for (int co = 0; co < Co; ++co) db.data[co] += Gm.row(co).sum();
        }
        const bool need_w = tape.wants_grad(w.id), need_x = tape.wants_grad(x.id);
        if (!need_w && !need_x) return;
        std::vector<double> col;
        if (need_w) {
            detail::im2col(tape.value_of(x.id), k, col);
            MapMat dW(tape.grad_mut(w.id).data.data(), Co, K);
            dW.noalias() += Gm * CMapMat(col.data(), K, HW).transpose();
        }
        if (need_x) {
            col.assign(static_cast<std::size_t>(K) * HW, 0.0);
            MapMat dcol(col.data(), K, HW);
            dcol.noalias() = CMapMat(tape.value_of(w.id).data.data(), Co, K).transpose() * Gm;
            detail::col2im_add(col, Ci, H, Wd, k, tape.grad_mut(x.id));
        }
    });
}

inline Var add(Tape& tape, Var a, Var b) {
    const Tensor& A = tape.value(a);
    const Tensor& B = tape.value(b);
    detail::expect_same(A, B, "add");
    Tensor out(A.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = A.data[i] + B.data[i];
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {a, b}), [&tape, a, b, yid] {
        const Tensor& G = tape.out_grad(yid);
        detail::accumulate(tape, a, G);
        detail::accumulate(tape, b, G);
    });
}

inline Var scale(Tape& tape, Var x, double s) {
    Tensor out = tape.value(x);
    for (double& v : out.data) v *= s;
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {x}), [&tape, x, yid, s] {
        const Tensor& G = tape.out_grad(yid);
        Tensor& dx = tape.grad_mut(x.id);
        for (std::size_t i = 0; i < G.size(); ++i) dx.data[i] += s * G.data[i];
    });
}

// a * x + offset, with offset a constant of x's shape.
inline Var affine(Tape& tape, Var x, double a, const Tensor& offset) {
    const Tensor& X = tape.value(x);
    detail::expect_same(X, offset, "affine");
    Tensor out(X.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a * X.data[i] + offset.data[i];
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {x}), [&tape, x, yid, a] {
        const Tensor& G = tape.out_grad(yid);
        Tensor& dx = tape.grad_mut(x.id);
        for (std::size_t i = 0; i < G.size(); ++i) dx.data[i] += a * G.data[i];
    });
}

// x: [C,...], v: [C]; adds v[c] to every element of channel c.
inline Var add_channel(Tape& tape, Var x, Var v) {
    const Tensor& X = tape.value(x);
    const Tensor& V = tape.value(v);
    const int C = X.dim(0);
    if (V.size() != static_cast<std::size_t>(C)) throw ShapeError("add_channel: vector length != channels");
    const std::size_t plane = X.size() / C;
    Tensor out = X;
    for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < plane; ++i) out.data[c * plane + i] += V.data[c];
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {x, v}), [&tape, x, v, yid, C, plane] {
        const Tensor& G = tape.out_grad(yid);
        detail::accumulate(tape, x, G);
        if (tape.wants_grad(v.id)) {
            Tensor& dv = tape.grad_mut(v.id);
            for (int c = 0; c < C; ++c) {
                double s = 0.0;
                for (std::size_t i = 0; i < plane; ++i) s += G.data[c * plane + i];
                dv.data[c] += s;
            }
        }
    });
}

inline Var silu(Tape& tape, Var x) {
    const Tensor& X = tape.value(x);
    Tensor out(X.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = X.data[i] * detail::sigmoid(X.data[i]);
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {x}), [&tape, x, yid] {
        const Tensor& G = tape.out_grad(yid);
        const Tensor& X = tape.value_of(x.id);
        Tensor& dx = tape.grad_mut(x.id);
        for (std::size_t i = 0; i < G.size(); ++i) {
            const double s = detail::sigmoid(X.data[i]);
            dx.data[i] += G.data[i] * (s + X.data[i] * s * (1.0 - s));
        }
    });
}

inline Var sigmoid(Tape& tape, Var x) {
    const Tensor& X = tape.value(x);
    Tensor out(X.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = detail::sigmoid(X.data[i]);
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {x}), [&tape, x, yid] {
        const Tensor& G = tape.out_grad(yid);
        const Tensor& Y = tape.value_of(yid);
        Tensor& dx = tape.grad_mut(x.id);
        for (std::size_t i = 0; i < G.size(); ++i) dx.data[i] += G.data[i] * Y.data[i] * (1.0 - Y.data[i]);
    });
}

inline Var clamp(Tape& tape, Var x, double lo, double hi) {
    const Tensor& X = tape.value(x);
    Tensor out(X.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = std::clamp(X.data[i], lo, hi);
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {x}), [&tape, x, yid, lo, hi] {
        const Tensor& G = tape.out_grad(yid);
        const Tensor& X = tape.value_of(x.id);
        Tensor& dx = tape.grad_mut(x.id);
        for (std::size_t i = 0; i < G.size(); ++i)
            if (X.data[i] > lo && X.data[i] < hi) dx.data[i] += G.data[i];
    });
}

// 2x2 average pooling of [C,H,W] with even H and W.
inline Var avgpool2(Tape& tape, Var x) {
    const Tensor& X = tape.value(x);
    detail::expect_rank(X, 3, "avgpool2");
    const int C = X.dim(0), H = X.dim(1), W = X.dim(2);
    if (H % 2 || W % 2) throw ShapeError("avgpool2: spatial size must be even, got " + X.shape_str());
    const int h = H / 2, w = W / 2;
    Tensor out({C, h, w});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                const double* r0 = &X.data[(static_cast<std::size_t>(c) * H + 2 * y) * W + 2 * xx];
                const double* r1 = r0 + W;
                out.data[(static_cast<std::size_t>(c) * h + y) * w + xx] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
            }
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {x}), [&tape, x, yid, C, H, W, h, w] {
        const Tensor& G = tape.out_grad(yid);
        Tensor& dx = tape.grad_mut(x.id);
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    const double g = 0.25 * G.data[(static_cast<std::size_t>(c) * h + y) * w + xx];
                    double* r0 = &dx.data[(static_cast<std::size_t>(c) * H + 2 * y) * W + 2 * xx];
                    double* r1 = r0 + W;
                    r0[0] += g, r0[1] += g, r1[0] += g, r1[1] += g;
                }
    });
}

// Nearest-neighbour 2x upsampling of [C,H,W].
inline Var upsample2(Tape& tape, Var x) {
    const Tensor& X = tape.value(x);
    detail::expect_rank(X, 3, "upsample2");
    const int C = X.dim(0), h = X.dim(1), w = X.dim(2), H = 2 * h, W = 2 * w;
    Tensor out({C, H, W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx)
                out.data[(static_cast<std::size_t>(c) * H + y) * W + xx] =
                    X.data[(static_cast<std::size_t>(c) * h + y / 2) * w + xx / 2];
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {x}), [&tape, x, yid, C, H, W, h, w] {
        const Tensor& G = tape.out_grad(yid);
        Tensor& dx = tape.grad_mut(x.id);
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    dx.data[(static_cast<std::size_t>(c) * h + y / 2) * w + xx / 2] +=
                        G.data[(static_cast<std::size_t>(c) * H + y) * W + xx];
    });
}

// Concatenation along the leading dimension; trailing dims must agree.
inline Var concat(Tape& tape, const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Tensor& first = tape.value(parts[0]);
    std::vector<int> shape = first.shape;
    shape[0] = 0;
    std::vector<std::size_t> sizes;
    for (Var p : parts) {
        const Tensor& t = tape.value(p);
        if (t.rank() != first.rank() || !std::equal(t.shape.begin() + 1, t.shape.end(), first.shape.begin() + 1))
            throw ShapeError("concat: trailing dims differ: " + t.shape_str() + " vs " + first.shape_str());
        shape[0] += t.dim(0);
        sizes.push_back(t.size());
    }
    Tensor out(shape);
    std::size_t off = 0;
    bool rg = false;
    for (Var p : parts) {
        const Tensor& t = tape.value(p);
        std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += t.size();
        rg = rg || (tape.recording() && tape.requires_grad(p));
    }
    const int yid = tape.next_id();
    return tape.push(std::move(out), rg, [&tape, parts, sizes, yid] {
        const Tensor& G = tape.out_grad(yid);
        std::size_t off = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (tape.wants_grad(parts[i].id)) {
                Tensor& d = tape.grad_mut(parts[i].id);
                for (std::size_t j = 0; j < sizes[i]; ++j) d.data[j] += G.data[off + j];
            }
            off += sizes[i];
        }
    });
}

// v: [n], W: [m,n], b: [m] -> [m]
inline Var linear(Tape& tape, Var v, Var w, Var b) {
    const Tensor& V = tape.value(v);
    const Tensor& Wt = tape.value(w);
    detail::expect_rank(Wt, 2, "linear");
    const int m = Wt.dim(0), n = Wt.dim(1);
    if (V.size() != static_cast<std::size_t>(n) || tape.value(b).size() != static_cast<std::size_t>(m))
        throw ShapeError("linear: weight " + Wt.shape_str() + " incompatible with input " + V.shape_str());
    Tensor out({m});
    Eigen::Map<Eigen::VectorXd> o(out.data.data(), m);
    o.noalias() = CMapMat(Wt.data.data(), m, n) * Eigen::Map<const Eigen::VectorXd>(V.data.data(), n);
    o += Eigen::Map<const Eigen::VectorXd>(tape.value(b).data.data(), m);
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {v, w, b}), [&tape, v, w, b, yid, m, n] {
        const Tensor& G = tape.out_grad(yid);
        Eigen::Map<const Eigen::VectorXd> g(G.data.data(), m);
        if (tape.wants_grad(b.id)) Eigen::Map<Eigen::VectorXd>(tape.grad_mut(b.id).data.data(), m) += g;
        if (tape.wants_grad(w.id))
            MapMat(tape.grad_mut(w.id).data.data(), m, n).noalias() +=
                g * Eigen::Map<const Eigen::VectorXd>(tape.value_of(v.id).data.data(), n).transpose();
        if (tape.wants_grad(v.id))
            Eigen::Map<Eigen::VectorXd>(tape.grad_mut(v.id).data.data(), n).noalias() +=
                CMapMat(tape.value_of(w.id).data.data(), m, n).transpose() * g;
    });
}

// A: [m,k], B: [k,n] -> [m,n]
inline Var matmul(Tape& tape, Var a, Var b) {
    const Tensor& A = tape.value(a);
    const Tensor& B = tape.value(b);
    detail::expect_rank(A, 2, "matmul");
    detail::expect_rank(B, 2, "matmul");
    const int m = A.dim(0), k = A.dim(1), n = B.dim(1);
    if (B.dim(0) != k) throw ShapeError("matmul: " + A.shape_str() + " x " + B.shape_str());
    Tensor out({m, n});
    MapMat(out.data.data(), m, n).noalias() = CMapMat(A.data.data(), m, k) * CMapMat(B.data.data(), k, n);
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {a, b}), [&tape, a, b, yid, m, k, n] {
        CMapMat G(tape.out_grad(yid).data.data(), m, n);
        if (tape.wants_grad(a.id))
            MapMat(tape.grad_mut(a.id).data.data(), m, k).noalias() +=
                G * CMapMat(tape.value_of(b.id).data.data(), k, n).transpose();
        if (tape.wants_grad(b.id))
            MapMat(tape.grad_mut(b.id).data.data(), k, n).noalias() +=
                CMapMat(tape.value_of(a.id).data.data(), m, k).transpose() * G;
    });
}

inline Var transpose(Tape& tape, Var a) {
    const Tensor& A = tape.value(a);
    detail::expect_rank(A, 2, "transpose");
    const int m = A.dim(0), n = A.dim(1);
    Tensor out({n, m});
    MapMat(out.data.data(), n, m) = CMapMat(A.data.data(), m, n).transpose();
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {a}), [&tape, a, yid, m, n] {
        MapMat(tape.grad_mut(a.id).data.data(), m, n) += CMapMat(tape.out_grad(yid).data.data(), n, m).transpose();
    });
}

// Row-wise softmax of [m,n], max-subtracted.
inline Var softmax_rows(Tape& tape, Var a) {
    const Tensor& A = tape.value(a);
    detail::expect_rank(A, 2, "softmax_rows");
    const int m = A.dim(0), n = A.dim(1);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        const double* r = &A.data[static_cast<std::size_t>(i) * n];
        double* o = &out.data[static_cast<std::size_t>(i) * n];
        const double mx = *std::max_element(r, r + n);
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += (o[j] = std::exp(r[j] - mx));
        for (int j = 0; j < n; ++j) o[j] /= s;
    }
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {a}), [&tape, a, yid, m, n] {
        const Tensor& G = tape.out_grad(yid);
        const Tensor& Y = tape.value_of(yid);
        Tensor& dA = tape.grad_mut(a.id);
        for (int i = 0; i < m; ++i) {
            const std::size_t o = static_cast<std::size_t>(i) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += G.data[o + j] * Y.data[o + j];
            for (int j = 0; j < n; ++j) dA.data[o + j] += Y.data[o + j] * (G.data[o + j] - dot);
        }
    });
}

// [C,H,W] -> [H*W, C]
inline Var to_tokens(Tape& tape, Var x) {
    const Tensor& X = tape.value(x);
    detail::expect_rank(X, 3, "to_tokens");
    const int C = X.dim(0), L = X.dim(1) * X.dim(2);
    Tensor out({L, C});
    MapMat(out.data.data(), L, C) = CMapMat(X.data.data(), C, L).transpose();
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {x}), [&tape, x, yid, C, L] {
        MapMat(tape.grad_mut(x.id).data.data(), C, L) += CMapMat(tape.out_grad(yid).data.data(), L, C).transpose();
    });
}

// [H*W, C] -> [C,H,W]
inline Var from_tokens(Tape& tape, Var t, int H, int W) {
    const Tensor& T = tape.value(t);
    detail::expect_rank(T, 2, "from_tokens");
    const int L = T.dim(0), C = T.dim(1);
    if (L != H * W) throw ShapeError("from_tokens: token count does not match H*W");
    Tensor out({C, H, W});
    MapMat(out.data.data(), C, L) = CMapMat(T.data.data(), L, C).transpose();
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {t}), [&tape, t, yid, C, L] {
        MapMat(tape.grad_mut(t.id).data.data(), L, C) += CMapMat(tape.out_grad(yid).data.data(), C, L).transpose();
    });
}

// Columns [start, start+count) of a [m,n] matrix.
inline Var slice_cols(Tape& tape, Var a, int start, int count) {
    const Tensor& A = tape.value(a);
    detail::expect_rank(A, 2, "slice_cols");
    const int m = A.dim(0), n = A.dim(1);
    if (start < 0 || count < 1 || start + count > n) throw ShapeError("slice_cols: range out of bounds");
    Tensor out({m, count});
    MapMat(out.data.data(), m, count) = CMapMat(A.data.data(), m, n).middleCols(start, count);
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {a}), [&tape, a, yid, m, n, start, count] {
        MapMat(tape.grad_mut(a.id).data.data(), m, n).middleCols(start, count) +=
            CMapMat(tape.out_grad(yid).data.data(), m, count);
    });
}

inline Var concat_cols(Tape& tape, const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int m = tape.value(parts[0]).dim(0);
    int n = 0;
    std::vector<int> widths;
    bool rg = false;
    for (Var p : parts) {
        const Tensor& t = tape.value(p);
        detail::expect_rank(t, 2, "concat_cols");
        if (t.dim(0) != m) throw ShapeError("concat_cols: row count mismatch");
        widths.push_back(t.dim(1));
        n += t.dim(1);
        rg = rg || (tape.recording() && tape.requires_grad(p));
    }
    Tensor out({m, n});
    MapMat O(out.data.data(), m, n);
    int off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        O.middleCols(off, widths[i]) = CMapMat(tape.value(parts[i]).data.data(), m, widths[i]);
        off += widths[i];
    }
    const int yid = tape.next_id();
    return tape.push(std::move(out), rg, [&tape, parts, widths, yid, m, n] {
        CMapMat G(tape.out_grad(yid).data.data(), m, n);
        int off = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (tape.wants_grad(parts[i].id))
                MapMat(tape.grad_mut(parts[i].id).data.data(), m, widths[i]) += G.middleCols(off, widths[i]);
            off += widths[i];
        }
    });
}

// Row `index` of a [V,D] table.
inline Var embedding(Tape& tape, Var table, int index) {
    const Tensor& T = tape.value(table);
    detail::expect_rank(T, 2, "embedding");
    const int V = T.dim(0), D = T.dim(1);
    if (index < 0 || index >= V) throw DomainError("embedding: index " + std::to_string(index) + " out of range");
    Tensor out({D}, std::vector<double>(T.data.begin() + static_cast<std::ptrdiff_t>(index) * D,
                                        T.data.begin() + static_cast<std::ptrdiff_t>(index + 1) * D));
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {table}), [&tape, table, yid, index, D] {
        const Tensor& G = tape.out_grad(yid);
        Tensor& dT = tape.grad_mut(table.id);
        for (int j = 0; j < D; ++j) dT.data[static_cast<std::size_t>(index) * D + j] += G.data[j];
    });
}

// Weighted luminance over the channel axis of [3,H,W]; [1,H,W] passes through.
inline Var luminance(Tape& tape, Var x) {
    const Tensor& X = tape.value(x);
    detail::expect_rank(X, 3, "luminance");
    if (X.dim(0) == 1) return x;
    if (X.dim(0) != 3) throw ShapeError("luminance: expected 1 or 3 channels");
    static constexpr double w[3] = {0.299, 0.587, 0.114};
    const std::size_t plane = static_cast<std::size_t>(X.dim(1)) * X.dim(2);
    Tensor out({1, X.dim(1), X.dim(2)});
    for (std::size_t i = 0; i < plane; ++i)
        out.data[i] = w[0] * X.data[i] + w[1] * X.data[plane + i] + w[2] * X.data[2 * plane + i];
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {x}), [&tape, x, yid, plane] {
        const Tensor& G = tape.out_grad(yid);
        Tensor& dx = tape.grad_mut(x.id);
        for (int c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < plane; ++i) dx.data[c * plane + i] += w[c] * G.data[i];
    });
}

// Mean of (x - target)^2.
inline Var mse(Tape& tape, Var x, const Tensor& target) {
    const Tensor& X = tape.value(x);
    detail::expect_same(X, target, "mse");
    const double n = static_cast<double>(X.size());
    double s = 0.0;
    for (std::size_t i = 0; i < X.size(); ++i) {
        const double d = X.data[i] - target.data[i];
        s += d * d;
    }
    const int yid = tape.next_id();
    return tape.push(Tensor({1}, {s / n}), detail::any_grad(tape, {x}), [&tape, x, yid, target, n] {
        const double g = tape.out_grad(yid).data[0];
        const Tensor& X = tape.value_of(x.id);
        Tensor& dx = tape.grad_mut(x.id);
        for (std::size_t i = 0; i < X.size(); ++i) dx.data[i] += g * 2.0 * (X.data[i] - target.data[i]) / n;
    });
}

// Mean binary cross-entropy; probabilities are clamped to [eps, 1-eps] and the
// clamped entries pass no gradient.
inline Var bce(Tape& tape, Var p, const Tensor& targets, double eps = 1e-7) {
    const Tensor& P = tape.value(p);
    if (P.size() != targets.size()) throw ShapeError("bce: size mismatch");
    const double n = static_cast<double>(P.size());
    double s = 0.0;
    for (std::size_t i = 0; i < P.size(); ++i) {
        const double q = std::clamp(P.data[i], eps, 1.0 - eps);
        s -= targets.data[i] * std::log(q) + (1.0 - targets.data[i]) * std::log(1.0 - q);
    }
    const int yid = tape.next_id();
    return tape.push(Tensor({1}, {s / n}), detail::any_grad(tape, {p}), [&tape, p, yid, targets, n, eps] {
        const double g = tape.out_grad(yid).data[0];
        const Tensor& P = tape.value_of(p.id);
        Tensor& dp = tape.grad_mut(p.id);
        for (std::size_t i = 0; i < P.size(); ++i) {
            const double q = P.data[i];
            if (q <= eps || q >= 1.0 - eps) continue;
            dp.data[i] += g * (-(targets.data[i] / q) + (1.0 - targets.data[i]) / (1.0 - q)) / n;
        }
    });
}

// Softmax across the leading axis of [N,H,W] at every pixel, max-subtracted.
inline Var softmax_channels(Tape& tape, Var x) {
    const Tensor& X = tape.value(x);
    detail::expect_rank(X, 3, "softmax_channels");
    const int N = X.dim(0);
    const std::size_t P = static_cast<std::size_t>(X.dim(1)) * X.dim(2);
    Tensor out(X.shape);
    for (std::size_t p = 0; p < P; ++p) {
        double mx = X.data[p];
        for (int n = 1; n < N; ++n) mx = std::max(mx, X.data[n * P + p]);
        double s = 0.0;
        for (int n = 0; n < N; ++n) s += (out.data[n * P + p] = std::exp(X.data[n * P + p] - mx));
        for (int n = 0; n < N; ++n) out.data[n * P + p] /= s;
    }
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {x}), [&tape, x, yid, N, P] {
        const Tensor& G = tape.out_grad(yid);
        const Tensor& Y = tape.value_of(yid);
        Tensor& dx = tape.grad_mut(x.id);
        for (std::size_t p = 0; p < P; ++p) {
            double dot = 0.0;
            for (int n = 0; n < N; ++n) dot += G.data[n * P + p] * Y.data[n * P + p];
            for (int n = 0; n < N; ++n) dx.data[n * P + p] += Y.data[n * P + p] * (G.data[n * P + p] - dot);
        }
    });
}

// sum_n weights[n] (.) preds[n], with weights [N,H,W] and constant preds [C,H,W].
inline Var weighted_fuse(Tape& tape, Var weights, const std::vector<Tensor>& preds) {
    const Tensor& Wt = tape.value(weights);
    detail::expect_rank(Wt, 3, "weighted_fuse");
    const int N = Wt.dim(0);
    if (static_cast<int>(preds.size()) != N) throw ShapeError("weighted_fuse: weight/prediction count mismatch");
    const std::size_t P = static_cast<std::size_t>(Wt.dim(1)) * Wt.dim(2);
    const int C = preds[0].dim(0);
    for (const auto& p : preds)
        if (p.rank() != 3 || p.dim(0) != C || p.dim(1) != Wt.dim(1) || p.dim(2) != Wt.dim(2))
            throw ShapeError("weighted_fuse: prediction " + p.shape_str() + " does not match weights " + Wt.shape_str());
    Tensor out(preds[0].shape);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p) out.data[c * P + p] += Wt.data[n * P + p] * preds[n].data[c * P + p];
    const int yid = tape.next_id();
    return tape.push(std::move(out), detail::any_grad(tape, {weights}), [&tape, weights, yid, preds, N, C, P] {
        const Tensor& G = tape.out_grad(yid);
        Tensor& dw = tape.grad_mut(weights.id);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (std::size_t p = 0; p < P; ++p) dw.data[n * P + p] += G.data[c * P + p] * preds[n].data[c * P + p];
    });
}

}  // namespace mural::nn
