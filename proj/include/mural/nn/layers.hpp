// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mural/core/rng.hpp"
#include "mural/nn/autodiff.hpp"
#include "mural/nn/params.hpp"

namespace mural::nn {

inline void add_conv(ParameterStore& store, const std::string& name, int cin, int cout, int k, Rng& rng,
                     double gain = 1.0) {
    const double bound = gain / std::sqrt(static_cast<double>(cin * k * k));
    store.add(name + ".w", Tensor::uniform({cout, cin, k, k}, bound, rng));
    store.add(name + ".b", Tensor({cout}));
}

inline Var conv(Binder& p, Var x, const std::string& name) {
    return conv2d(p.tape(), x, p(name + ".w"), p(name + ".b"));
}

inline void add_dense(ParameterStore& store, const std::string& name, int in, int out, Rng& rng, double gain = 1.0) {
    store.add(name + ".w", Tensor::uniform({out, in}, gain / std::sqrt(static_cast<double>(in)), rng));
    store.add(name + ".b", Tensor({out}));
}

inline Var dense(Binder& p, Var v, const std::string& name) {
    return linear(p.tape(), v, p(name + ".w"), p(name + ".b"));
}

// Transformer-style sinusoidal features of a scalar timestep.
inline Tensor sinusoidal_embedding(int t, int dim) {
    Tensor e({dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
        e.data[i] = std::sin(t * freq);
        e.data[half + i] = std::cos(t * freq);
    }
    return e;
}

// sinusoid -> dense -> SiLU -> dense
inline void add_time_mlp(ParameterStore& store, const std::string& name, int dim, Rng& rng) {
    add_dense(store, name + ".fc1", dim, dim, rng);
    add_dense(store, name + ".fc2", dim, dim, rng);
}

inline Var time_mlp(Binder& p, int t, int dim, const std::string& name) {
    Tape& tape = p.tape();
    Var e = tape.constant(sinusoidal_embedding(t, dim));
    return dense(p, silu(tape, dense(p, e, name + ".fc1")), name + ".fc2");
}

// x + conv2(silu(conv1(silu(x)) + proj(emb)))
inline void add_resblock(ParameterStore& store, const std::string& name, int ch, int emb_dim, Rng& rng) {
    add_conv(store, name + ".conv1", ch, ch, 3, rng);
    add_dense(store, name + ".emb", emb_dim, ch, rng);
    add_conv(store, name + ".conv2", ch, ch, 3, rng, 0.5);
}

inline Var resblock(Binder& p, Var x, Var emb_act, const std::string& name) {
    Tape& tape = p.tape();
    Var h = conv(p, silu(tape, x), name + ".conv1");
    h = add_channel(tape, h, dense(p, emb_act, name + ".emb"));
    h = conv(p, silu(tape, h), name + ".conv2");
    return add(tape, x, h);
}

// Scaled dot-product attention over token matrices q,k: [L, heads*dk], v: [L, heads*dv].
// Heads are column blocks; outputs are concatenated in head order. When
// `weights` is given, the per-head [L,L] attention matrices are appended to it.
inline Var attention(Tape& tape, Var q, Var k, Var v, int heads, std::vector<Var>* weights = nullptr) {
    const int dq = tape.value(q).dim(1), dv = tape.value(v).dim(1);
    if (heads < 1 || dq % heads || dv % heads || tape.value(k).dim(1) != dq)
        throw ShapeError("attention: projection widths incompatible with " + std::to_string(heads) + " heads");
    const int dk = dq / heads, dvh = dv / heads;
    std::vector<Var> outs;
    for (int h = 0; h < heads; ++h) {
        Var qh = slice_cols(tape, q, h * dk, dk);
        Var kh = slice_cols(tape, k, h * dk, dk);
        Var vh = slice_cols(tape, v, h * dvh, dvh);
        Var a = softmax_rows(tape, scale(tape, matmul(tape, qh, transpose(tape, kh)), 1.0 / std::sqrt(double(dk))));
        if (weights) weights->push_back(a);
        outs.push_back(matmul(tape, a, vh));
    }
    return heads == 1 ? outs[0] : concat_cols(tape, outs);
}

// Resolves head width: 0 means channels / heads.
inline int msa_head_dim(int channels, int heads, int head_dim) {
    if (heads < 1) throw DomainError("MSA: heads must be >= 1");
    if (head_dim == 0) {
        if (channels % heads)
            throw DomainError("MSA: " + std::to_string(channels) + " channels not divisible by " +
                              std::to_string(heads) + " heads");
        return channels / heads;
    }
    if (heads * head_dim != channels)
        throw DomainError("MSA: heads x head_dim = " + std::to_string(heads * head_dim) + " does not match " +
                          std::to_string(channels) + " channels");
    return head_dim;
}

inline void add_msa(ParameterStore& store, const std::string& name, int channels, int heads, int head_dim, Rng& rng) {
    const int d = heads * msa_head_dim(channels, heads, head_dim);
    const double b = 1.0 / std::sqrt(static_cast<double>(channels));
    store.add(name + ".wq", Tensor::uniform({channels, d}, b, rng));
    store.add(name + ".wk", Tensor::uniform({channels, d}, b, rng));
    store.add(name + ".wv", Tensor::uniform({channels, d}, b, rng));
    store.add(name + ".wo", Tensor::uniform({d, channels}, 0.5 / std::sqrt(static_cast<double>(d)), rng));
    store.add(name + ".bo", Tensor({channels}));
}

// Mural spatial attention: 2x average-pool, multi-head self-attention over the
// pooled positions, output projection, 2x upsample, residual add.
inline Var msa(Binder& p, Var x, const std::string& name, int heads, std::vector<Var>* weights = nullptr) {
    Tape& tape = p.tape();
    const Tensor& X = tape.value(x);
    const int C = X.dim(0);
    Var pooled = avgpool2(tape, x);
    const int h = tape.value(pooled).dim(1), w = tape.value(pooled).dim(2);
    Var tokens = to_tokens(tape, pooled);
    Var q = matmul(tape, tokens, p(name + ".wq"));
    Var k = matmul(tape, tokens, p(name + ".wk"));
    Var v = matmul(tape, tokens, p(name + ".wv"));
    if (tape.value(q).dim(1) % heads) throw DomainError("MSA: projection width not divisible by heads");
    Var o = matmul(tape, attention(tape, q, k, v, heads, weights), p(name + ".wo"));
    Var map = add_channel(tape, from_tokens(tape, o, h, w), p(name + ".bo"));
    if (tape.value(map).dim(0) != C) throw ShapeError("MSA: output projection width mismatch");
    return add(tape, x, upsample2(tape, map));
}

}  // namespace mural::nn
