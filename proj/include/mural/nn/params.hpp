// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mural/core/error.hpp"
#include "mural/nn/autodiff.hpp"
#include "mural/nn/tensor.hpp"

namespace mural::nn {

struct Parameter {
    Tensor value;
    Tensor grad;
};

// Named trainable tensors with a gradient buffer of identical shape each.
// Iteration order is the lexicographic order of names.
class ParameterStore {
public:
    void add(const std::string& name, Tensor value) {
        if (params_.count(name)) throw Error("ParameterStore: duplicate parameter '" + name + "'");
        Tensor g = Tensor::zeros_like(value);
        params_.emplace(name, Parameter{std::move(value), std::move(g)});
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    Parameter& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("ParameterStore: no parameter '" + name + "'");
        return it->second;
    }
    const Parameter& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("ParameterStore: no parameter '" + name + "'");
        return it->second;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t size() const { return params_.size(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [_, p] : params_) n += p.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, p] : params_) std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
    }

    // Throws naming the first tensor holding a non-finite value or gradient.
    void check_finite(const char* context) const {
        for (const auto& [name, p] : params_) {
            if (!p.value.all_finite()) throw NonFiniteError(std::string(context) + ": parameter '" + name + "' is non-finite");
            if (!p.grad.all_finite()) throw NonFiniteError(std::string(context) + ": gradient of '" + name + "' is non-finite");
        }
    }

    bool operator==(const ParameterStore& o) const {
        if (params_.size() != o.params_.size()) return false;
        for (const auto& [name, p] : params_) {
            auto it = o.params_.find(name);
            if (it == o.params_.end() || it->second.value.shape != p.value.shape ||
                it->second.value.data != p.value.data)
                return false;
        }
        return true;
    }

private:
    std::map<std::string, Parameter> params_;
};

// Binds parameters to a tape on first use and routes their gradients back.
class Binder {
public:
    Binder(Tape& tape, const ParameterStore& store, bool trainable)
        : tape_(tape), store_(store), trainable_(trainable) {}

    Var operator()(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        Var v = tape_.leaf(store_.at(name).value, trainable_);
        bound_.emplace(name, v);
        return v;
    }

    Tape& tape() { return tape_; }
    const std::map<std::string, Var>& bound() const { return bound_; }

    void accumulate_into(ParameterStore& store) const {
        for (const auto& [name, v] : bound_) {
            Tensor g = tape_.grad(v);
            Tensor& dst = store.at(name).grad;
            for (std::size_t i = 0; i < g.size(); ++i) dst.data[i] += g.data[i];
        }
    }

private:
    Tape& tape_;
    const ParameterStore& store_;
    bool trainable_;
    std::map<std::string, Var> bound_;
};

struct AdamOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

    void step(ParameterStore& store) {
        ++t_;
        const double c1 = 1.0 - std::pow(opt_.beta1, t_);
        const double c2 = 1.0 - std::pow(opt_.beta2, t_);
        for (auto& [name, p] : store) {
            auto& [m, v] = moments_[name];
            if (m.empty()) {
                m.assign(p.value.size(), 0.0);
                v.assign(p.value.size(), 0.0);
            }
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad.data[i];
                m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
                v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
                p.value.data[i] -= opt_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
            }
        }
    }

    int steps_taken() const { return t_; }
    const AdamOptions& options() const { return opt_; }

private:
    AdamOptions opt_;
    int t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

//
// Checkpoint container
//
// Layout (little-endian):
//   "MURALCK1" | u32 version | u64 config hash | u32 len + metadata text |
//   u32 count | per tensor: u32 len + name, u32 rank, i32 dims[rank], f64 data[]
//

struct Checkpoint {
    std::uint64_t config_hash = 0;
    std::string metadata;  // key = value lines describing the model
    ParameterStore params;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'M', 'U', 'R', 'A', 'L', 'C', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
public:
    Reader(const std::string& bytes, std::string path) : b_(bytes), path_(std::move(path)) {}
    std::uint64_t get(int n) {
        if (pos_ + n > b_.size()) throw CheckpointError("truncated checkpoint " + path_);
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
        pos_ += n;
        return v;
    }
    std::string str(std::size_t n) {
        if (pos_ + n > b_.size()) throw CheckpointError("truncated checkpoint " + path_);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    const std::string& b_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    std::string out(detail::kCheckpointMagic, 8);
    detail::put_u32(out, detail::kCheckpointVersion);
    detail::put_u64(out, ck.config_hash);
    detail::put_u32(out, static_cast<std::uint32_t>(ck.metadata.size()));
    out += ck.metadata;
    detail::put_u32(out, static_cast<std::uint32_t>(ck.params.size()));
    for (const auto& [name, p] : ck.params) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
        for (int d : p.value.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (double v : p.value.data) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            detail::put_u64(out, bits);
        }
    }
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write checkpoint " + tmp.string());
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw IoError("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

// Rejects files whose config hash differs from `expected_hash` (unless it is 0).
inline Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_hash = 0) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    detail::Reader r(bytes, path.string());
    if (r.str(8) != std::string(detail::kCheckpointMagic, 8)) throw CheckpointError("not a checkpoint: " + path.string());
    const auto version = r.get(4);
    if (version != detail::kCheckpointVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
    Checkpoint ck;
    ck.config_hash = r.get(8);
    if (expected_hash != 0 && ck.config_hash != expected_hash)
        throw CheckpointError("config hash mismatch in " + path.string() + ": checkpoint was trained with a different configuration");
    ck.metadata = r.str(static_cast<std::size_t>(r.get(4)));
    const auto count = r.get(4);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = r.str(static_cast<std::size_t>(r.get(4)));
        const auto rank = r.get(4);
        if (rank > 8) throw CheckpointError("corrupt tensor rank in " + path.string());
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(r.get(4));
        Tensor t(shape);
        for (double& v : t.data) {
            const std::uint64_t bits = r.get(8);
            std::memcpy(&v, &bits, 8);
        }
        if (!t.all_finite()) throw CheckpointError("non-finite values in tensor '" + name + "' of " + path.string());
        ck.params.add(name, std::move(t));
    }
    if (!r.done()) throw CheckpointError("trailing bytes in checkpoint " + path.string());
    return ck;
}

}  // namespace mural::nn
