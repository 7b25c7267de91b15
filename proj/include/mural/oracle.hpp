// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mural/core/rng.hpp"
#include "mural/denoiser.hpp"
#include "mural/diffusion.hpp"
#include "mural/image.hpp"

namespace mural {

// x0 ~ N(mean, variance * I)
struct GaussianSpec {
    LatentImage mean;
    double variance = 1.0;

    void validate() const {
        if (!(variance > 0.0) || !std::isfinite(variance)) throw DomainError("GaussianSpec: variance must be > 0");
    }
};

// Every pixel draws its component independently with probability `weight`.
struct MixtureComponent {
    double weight = 1.0;
    GaussianSpec gaussian;
};

struct MixtureSpec {
    std::vector<MixtureComponent> components;

    void validate() const {
        if (components.empty()) throw DomainError("MixtureSpec: no components");
        double s = 0.0;
        for (const auto& c : components) {
            if (!(c.weight > 0.0)) throw DomainError("MixtureSpec: weights must be positive");
            c.gaussian.validate();
            if (c.gaussian.mean.shape() != components[0].gaussian.mean.shape())
                throw ShapeError("MixtureSpec: component means differ in shape");
            s += c.weight;
        }
        if (std::abs(s - 1.0) > 1e-12) throw DomainError("MixtureSpec: weights sum to " + std::to_string(s));
    }
};

// E[eps | x_t] for Gaussian data:
//   sqrt(1 - abar) (x_t - sqrt(abar) m) / (abar s^2 + 1 - abar)
inline LatentImage oracle_eps_gaussian(const LatentImage& xt, int t, const NoiseSchedule& sched,
                                       const GaussianSpec& spec) {
    spec.validate();
    detail::require_same_shape(xt, spec.mean, "oracle_eps_gaussian");
    sched.check_t(t);
    const double ab = sched.alpha_bar(t);
    const double ra = std::sqrt(ab), rs = std::sqrt(1.0 - ab);
    const double denom = ab * spec.variance + 1.0 - ab;
    std::vector<double> out(xt.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = rs * (xt.data()[i] - ra * spec.mean.data()[i]) / denom;
    return LatentImage(xt.shape(), std::move(out));
}

// Posterior component probabilities per pixel under the marginal of x_t,
// returned as [K][pixel].
inline std::vector<std::vector<double>> mixture_responsibilities(const LatentImage& xt, int t,
                                                                 const NoiseSchedule& sched, const MixtureSpec& spec) {
    spec.validate();
    detail::require_same_shape(xt, spec.components[0].gaussian.mean, "mixture_responsibilities");
    sched.check_t(t);
    const double ab = sched.alpha_bar(t), ra = std::sqrt(ab);
    const std::size_t K = spec.components.size();
    const std::size_t P = xt.pixel_count();
    const int C = xt.channels();
    std::vector<std::vector<double>> logw(K, std::vector<double>(P));
    for (std::size_t k = 0; k < K; ++k) {
        const auto& g = spec.components[k].gaussian;
        const double v = ab * g.variance + 1.0 - ab;
        const double base = std::log(spec.components[k].weight) - 0.5 * C * std::log(v);
        for (std::size_t p = 0; p < P; ++p) {
            double q = 0.0;
            for (int c = 0; c < C; ++c) {
                const double d = xt.data()[p * C + c] - ra * g.mean.data()[p * C + c];
                q += d * d;
            }
            logw[k][p] = base - 0.5 * q / v;
        }
    }
    for (std::size_t p = 0; p < P; ++p) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, logw[k][p]);
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += std::exp(logw[k][p] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t k = 0; k < K; ++k) logw[k][p] = std::exp(logw[k][p] - lse);
    }
    return logw;
}

inline LatentImage oracle_eps_mixture(const LatentImage& xt, int t, const NoiseSchedule& sched,
                                      const MixtureSpec& spec) {
    const auto resp = mixture_responsibilities(xt, t, sched, spec);
    const int C = xt.channels();
    std::vector<double> out(xt.size(), 0.0);
    for (std::size_t k = 0; k < spec.components.size(); ++k) {
        const LatentImage e = oracle_eps_gaussian(xt, t, sched, spec.components[k].gaussian);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += resp[k][i / C] * e.data()[i];
    }
    return LatentImage(xt.shape(), std::move(out));
}

inline LatentImage sample_gaussian(const GaussianSpec& spec, Rng& rng) {
    spec.validate();
    const double s = std::sqrt(spec.variance);
    std::vector<double> v(spec.mean.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = spec.mean.data()[i] + s * rng.normal();
    return LatentImage(spec.mean.shape(), std::move(v));
}

inline LatentImage sample_mixture(const MixtureSpec& spec, Rng& rng) {
    spec.validate();
    const LatentImage& m0 = spec.components[0].gaussian.mean;
    const int C = m0.channels();
    std::vector<double> v(m0.size());
    for (std::size_t p = 0; p < m0.pixel_count(); ++p) {
        double u = rng.uniform(), acc = 0.0;
        std::size_t k = 0;
        for (; k + 1 < spec.components.size(); ++k) {
            acc += spec.components[k].weight;
            if (u < acc) break;
        }
        const auto& g = spec.components[k].gaussian;
        const double s = std::sqrt(g.variance);
        for (int c = 0; c < C; ++c) v[p * C + c] = g.mean.data()[p * C + c] + s * rng.normal();
    }
    return LatentImage(m0.shape(), std::move(v));
}

// Oracle behind the predictor interface. `trained` is the schedule whose
// timesteps the sampler passes through model_timestep().
class OraclePredictor final : public NoisePredictor {
public:
    OraclePredictor(MixtureSpec spec, NoiseSchedule trained) : spec_(std::move(spec)), sched_(std::move(trained)) {
        spec_.validate();
    }
    int native_height() const override { return spec_.components[0].gaussian.mean.height(); }
    int native_width() const override { return spec_.components[0].gaussian.mean.width(); }
    LatentImage predict(const LatentImage& xt, int t, const ConditionSet&) const override {
        if (spec_.components.size() == 1) return oracle_eps_gaussian(xt, t, sched_, spec_.components[0].gaussian);
        return oracle_eps_mixture(xt, t, sched_, spec_);
    }

private:
    MixtureSpec spec_;
    NoiseSchedule sched_;
};

// Plain ancestral chain x_T ~ N(0,I) -> x_0 with a noise-prediction callback.
template <class Predict>
LatentImage reverse_chain(const Shape& shape, const NoiseSchedule& sched, Rng& rng, Predict&& predict) {
    auto gaussian = [&] {
        std::vector<double> v(shape.size());
        for (double& x : v) x = rng.normal();
        return LatentImage(shape, std::move(v));
    };
    LatentImage x = gaussian();
    for (int t = sched.steps(); t >= 1; --t) {
        const LatentImage eps = predict(x, t);
        x = reverse_step(x, t, eps, sched, t > 1 ? gaussian() : LatentImage(shape));
    }
    return x;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// CDF of a scalar mixture at pixel index `i` (first channel).
inline double mixture_cdf(const MixtureSpec& spec, std::size_t i, double x) {
    double f = 0.0;
    for (const auto& c : spec.components)
        f += c.weight * normal_cdf((x - c.gaussian.mean.data()[i]) / std::sqrt(c.gaussian.variance));
    return f;
}

// Two-sided Kolmogorov-Smirnov statistic of samples against a CDF.
template <class Cdf>
double ks_statistic(std::vector<double> samples, Cdf&& cdf) {
    if (samples.empty()) throw DomainError("ks_statistic: no samples");
    std::sort(samples.begin(), samples.end());
    const double n = static_cast<double>(samples.size());
    double d = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const double f = cdf(samples[i]);
        d = std::max({d, (i + 1) / n - f, f - i / n});
    }
    return d;
}

}  // namespace mural
