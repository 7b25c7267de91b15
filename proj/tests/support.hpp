// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include <cstring>

#include "mural/core/rng.hpp"
#include "mural/nn/autodiff.hpp"
#include "mural/nn/params.hpp"
#include "mural/oracle.hpp"

namespace mural::testing {

// Smallest K=2 objective over every split of scalar points into two nonempty groups.
inline double brute_force_two_means(const std::vector<double>& pts) {
    const int n = static_cast<int>(pts.size());
    double best = std::numeric_limits<double>::infinity();
    for (unsigned mask = 1; mask + 1 < (1u << n); ++mask) {
        double s[2] = {0, 0}, c[2] = {0, 0};
        for (int i = 0; i < n; ++i) {
            const int g = (mask >> i) & 1;
            s[g] += pts[i];
            c[g] += 1;
        }
        double j = 0;
        for (int i = 0; i < n; ++i) {
            const int g = (mask >> i) & 1;
            const double d = pts[i] - s[g] / c[g];
            j += d * d;
        }
        best = std::min(best, j);
    }
    return best;
}

struct GradCheck {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

// Central differences against the tape gradient for up to `per_tensor`
// entries of every parameter. `loss` builds the scalar on a fresh tape.
inline std::vector<GradCheck> check_gradients(
    nn::ParameterStore& store, const std::function<nn::Var(nn::Binder&)>& loss, std::size_t per_tensor = 6,
    double step = 1e-4) {
    nn::Tape tape;
    nn::Binder b(tape, store, true);
    const nn::Var l = loss(b);
    tape.backward(l);
    std::map<std::string, nn::Tensor> analytic;
    for (const auto& [name, v] : b.bound()) analytic.emplace(name, tape.grad(v));

    auto eval = [&] {
        nn::Tape t(false);
        nn::Binder bb(t, store, false);
        return t.value(loss(bb)).data[0];
    };
    std::vector<GradCheck> out;
    for (auto& [name, p] : store) {
        GradCheck gc{name, 0.0, 0};
        const auto it = analytic.find(name);
        const std::size_t n = p.value.size();
        const std::size_t stride = std::max<std::size_t>(1, n / per_tensor);
        for (std::size_t i = 0; i < n && gc.checked < per_tensor; i += stride) {
            const double orig = p.value.data[i];
            p.value.data[i] = orig + step;
            const double up = eval();
            p.value.data[i] = orig - step;
            const double down = eval();
            p.value.data[i] = orig;
            const double fd = (up - down) / (2 * step);
            const double an = it == analytic.end() ? 0.0 : it->second.data[i];
            const double scale = std::max({std::abs(fd), std::abs(an), 1e-6});
            gc.max_rel_error = std::max(gc.max_rel_error, std::abs(fd - an) / scale);
            ++gc.checked;
        }
        out.push_back(gc);
    }
    return out;
}

// Gaussian oracle plus a fixed pseudo-random error field of amplitude
// `error`. The field is a hash of (x_t, t), so it is deterministic but
// uncorrelated with anything a diffuser can see.
class NoisyOracle final : public NoisePredictor {
public:
    NoisyOracle(GaussianSpec spec, NoiseSchedule sched, double error, std::uint64_t salt)
        : spec_(std::move(spec)), sched_(std::move(sched)), error_(error), salt_(salt) {}

    int native_height() const override { return spec_.mean.height(); }
    int native_width() const override { return spec_.mean.width(); }

    LatentImage predict(const LatentImage& xt, int t, const ConditionSet&) const override {
        LatentImage e = oracle_eps_gaussian(xt, t, sched_, spec_);
        std::uint64_t h = salt_ ^ static_cast<std::uint64_t>(t);
        for (double v : xt.data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            h = splitmix64(h ^ bits);
        }
        Rng rng(h);
        auto d = e.mutable_data();
        for (double& v : d) v += error_ * rng.normal();
        return e;
    }

private:
    GaussianSpec spec_;
    NoiseSchedule sched_;
    double error_;
    std::uint64_t salt_;
};

}  // namespace mural::testing
