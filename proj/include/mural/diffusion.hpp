// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mural/contour.hpp"
#include "mural/core/error.hpp"
#include "mural/image.hpp"

namespace mural {

enum class SigmaMode {
    beta,       // sigma_t^2 = beta_t
    posterior,  // sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)
};

inline SigmaMode parse_sigma_mode(const std::string& s) {
    if (s == "beta") return SigmaMode::beta;
    if (s == "posterior") return SigmaMode::posterior;
    throw ConfigError("sigma_mode must be 'beta' or 'posterior', got '" + s + "'");
}

inline std::string to_string(SigmaMode m) { return m == SigmaMode::beta ? "beta" : "posterior"; }

// Tables for t = 1..T. alpha_bar(0) is 1 by convention.
class NoiseSchedule {
public:
    NoiseSchedule(std::vector<double> betas, SigmaMode sigma_mode = SigmaMode::beta,
                  std::vector<int> model_timesteps = {})
        : beta_(std::move(betas)), sigma_mode_(sigma_mode), model_t_(std::move(model_timesteps)) {
        if (beta_.empty()) throw DomainError("NoiseSchedule: T must be >= 1");
        alpha_.resize(beta_.size());
        alpha_bar_.resize(beta_.size());
        sigma_.resize(beta_.size());
        double prod = 1.0;
        for (std::size_t i = 0; i < beta_.size(); ++i) {
            if (!(beta_[i] > 0.0 && beta_[i] < 1.0))
                throw DomainError("NoiseSchedule: beta_" + std::to_string(i + 1) + " outside (0,1)");
            alpha_[i] = 1.0 - beta_[i];
            const double prev = prod;
            prod *= alpha_[i];
            alpha_bar_[i] = prod;
            const double var =
                sigma_mode_ == SigmaMode::beta ? beta_[i] : beta_[i] * (1.0 - prev) / (1.0 - prod);
            sigma_[i] = std::sqrt(var);
        }
        if (model_t_.empty()) {
            model_t_.resize(beta_.size());
            for (std::size_t i = 0; i < beta_.size(); ++i) model_t_[i] = static_cast<int>(i + 1);
        }
        if (model_t_.size() != beta_.size()) throw ShapeError("NoiseSchedule: timestep map length mismatch");
    }

    int steps() const { return static_cast<int>(beta_.size()); }
    SigmaMode sigma_mode() const { return sigma_mode_; }

    double beta(int t) const { return beta_[index(t)]; }
    double alpha(int t) const { return alpha_[index(t)]; }
    double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_[index(t)]; }
    double sigma(int t) const { return sigma_[index(t)]; }
    // Timestep of the original training schedule that step t corresponds to.
    int model_timestep(int t) const { return t == 0 ? 0 : model_t_[index(t)]; }

    const std::vector<double>& betas() const { return beta_; }

    void check_t(int t, bool allow_zero = false) const {
        if (t < (allow_zero ? 0 : 1) || t > steps())
            throw DomainError("timestep " + std::to_string(t) + " outside [" + (allow_zero ? "0" : "1") + "," +
                              std::to_string(steps()) + "]");
    }

private:
    std::size_t index(int t) const {
        check_t(t);
        return static_cast<std::size_t>(t - 1);
    }

    std::vector<double> beta_, alpha_, alpha_bar_, sigma_;
    SigmaMode sigma_mode_;
    std::vector<int> model_t_;
};

// Linear beta from beta_start to beta_end over T steps.
inline NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02,
                                   SigmaMode sigma_mode = SigmaMode::beta) {
    if (T < 1) throw DomainError("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw DomainError("make_schedule: need 0 < beta_start <= beta_end < 1");
    std::vector<double> b(T);
    for (int i = 0; i < T; ++i)
        b[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (T - 1);
    return NoiseSchedule(std::move(b), sigma_mode);
}

// Linear schedule whose endpoints are the 1000-step defaults scaled by 1000/T,
// so short chains still end near pure noise.
inline NoiseSchedule make_scaled_schedule(int T, SigmaMode sigma_mode = SigmaMode::beta) {
    if (T < 1) throw DomainError("make_scaled_schedule: T must be >= 1");
    const double k = 1000.0 / T;
    if (0.02 * k >= 1.0) throw DomainError("make_scaled_schedule: T too small for scaled betas");
    return make_schedule(T, 1e-4 * k, 0.02 * k, sigma_mode);
}

// Sub-sequence of `steps` timesteps of a trained schedule, with betas
// recomputed so the cumulative products match the originals at the kept steps.
inline NoiseSchedule respace(const NoiseSchedule& sched, int steps) {
    if (steps < 1 || steps > sched.steps())
        throw DomainError("respace: steps must lie in [1," + std::to_string(sched.steps()) + "]");
    if (steps == sched.steps()) return sched;
    std::vector<int> kept(steps);
    for (int i = 1; i <= steps; ++i)
        kept[i - 1] = static_cast<int>(std::lround(static_cast<double>(i) * sched.steps() / steps));
    std::vector<double> b(steps);
    double prev = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double ab = sched.alpha_bar(kept[i]);
        b[i] = std::min(1.0 - ab / prev, 0.999999);
        prev = ab;
    }
    return NoiseSchedule(std::move(b), sched.sigma_mode(), std::move(kept));
}

namespace detail {

inline void require_same_shape(const LatentImage& a, const LatentImage& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

}  // namespace detail

// Summation by recursive halving; the result depends only on the values and
// their order, not on how work is split.
inline double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 8) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t h = v.size() / 2;
    return pairwise_sum(v.first(h)) + pairwise_sum(v.subspan(h));
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline LatentImage forward_diffuse(const LatentImage& x0, int t, const LatentImage& eps, const NoiseSchedule& sched) {
    detail::require_same_shape(x0, eps, "forward_diffuse");
    sched.check_t(t, /*allow_zero=*/true);
    const double a = std::sqrt(sched.alpha_bar(t));
    const double s = std::sqrt(1.0 - sched.alpha_bar(t));
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0.data()[i] + s * eps.data()[i];
    return LatentImage(x0.shape(), std::move(out));
}

// One ancestral step:
//   x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_pred) / sqrt(alpha_t) + sigma_t * noise
// `noise` must be zero at t = 1.
inline LatentImage reverse_step(const LatentImage& xt, int t, const LatentImage& eps_pred, const NoiseSchedule& sched,
                                const LatentImage& noise) {
    detail::require_same_shape(xt, eps_pred, "reverse_step");
    detail::require_same_shape(xt, noise, "reverse_step");
    sched.check_t(t);
    if (t == 1)
        for (double v : noise.data())
            if (v != 0.0) throw DomainError("reverse_step: the final step (t=1) must not add noise");
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
    const double coef = (1.0 - sched.alpha(t)) / std::sqrt(1.0 - sched.alpha_bar(t));
    const double sigma = sched.sigma(t);
    std::vector<double> out(xt.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = inv_sqrt_alpha * (xt.data()[i] - coef * eps_pred.data()[i]) + sigma * noise.data()[i];
    return LatentImage(xt.shape(), std::move(out));
}

// Single-step estimate of the clean sample from x_t and a noise prediction.
inline LatentImage predict_x0(const LatentImage& xt, int t, const LatentImage& eps_pred, const NoiseSchedule& sched) {
    detail::require_same_shape(xt, eps_pred, "predict_x0");
    const double ab = sched.alpha_bar(t);
    const double a = 1.0 / std::sqrt(ab), s = std::sqrt(1.0 - ab);
    std::vector<double> out(xt.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * (xt.data()[i] - s * eps_pred.data()[i]);
    return LatentImage(xt.shape(), std::move(out));
}

// Mean squared error over all elements.
inline double diffusion_loss(const LatentImage& eps_pred, const LatentImage& eps_true) {
    detail::require_same_shape(eps_pred, eps_true, "diffusion_loss");
    std::vector<double> sq(eps_pred.size());
    for (std::size_t i = 0; i < sq.size(); ++i) {
        const double d = eps_pred.data()[i] - eps_true.data()[i];
        sq[i] = d * d;
    }
    return pairwise_sum(sq) / static_cast<double>(sq.size());
}

// Conditioning bundle: the contour mask, an optional style tag and the reward weight.
struct ConditionSet {
    ContourMask contour;
    std::optional<int> tag;
    double lambda = 1.0;
    double reward_threshold = 0.5;  // luminance midpoint of the contour clusters

    void validate(int height, int width) const {
        if (!contour.same_shape(height, width))
            throw ShapeError("ConditionSet: contour is " + std::to_string(contour.height()) + "x" +
                             std::to_string(contour.width()) + ", working resolution is " + std::to_string(height) +
                             "x" + std::to_string(width));
        if (!(lambda >= 0.0)) throw DomainError("ConditionSet: lambda must be >= 0");
    }
};

// Maps a generated image to a per-pixel foreground probability.
class RewardModel {
public:
    virtual ~RewardModel() = default;
    virtual std::vector<double> predict(const Image& generated) const = 0;
};

// sigmoid((threshold - luminance) / temperature): a smooth re-extraction of
// the dark-stroke contour. Approaches the hard K-means split as temperature -> 0.
class SoftContourReward final : public RewardModel {
public:
    explicit SoftContourReward(double threshold, double temperature = 0.05)
        : threshold_(threshold), temperature_(temperature) {
        if (!(temperature > 0.0)) throw DomainError("SoftContourReward: temperature must be > 0");
    }

    std::vector<double> predict(const Image& generated) const override {
        const Image g = to_grayscale(generated);
        std::vector<double> p(g.size());
        for (std::size_t i = 0; i < p.size(); ++i)
            p[i] = 1.0 / (1.0 + std::exp(-(threshold_ - g.data()[i]) / temperature_));
        return p;
    }

    double threshold() const { return threshold_; }
    double temperature() const { return temperature_; }

private:
    double threshold_;
    double temperature_;
};

inline constexpr double kProbabilityClamp = 1e-7;

inline double binary_cross_entropy(std::span<const double> targets, std::span<const double> probs) {
    if (targets.size() != probs.size()) throw ShapeError("binary_cross_entropy: length mismatch");
    std::vector<double> terms(targets.size());
    for (std::size_t i = 0; i < terms.size(); ++i) {
        const double p = std::clamp(probs[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
        terms[i] = -(targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p));
    }
    return pairwise_sum(terms) / static_cast<double>(terms.size());
}

// Per-pixel cross-entropy between the conditioning contour and the contour the
// reward model recovers from the generated image.
inline double reward_loss(const ConditionSet& cond, const Image& x0_generated, const RewardModel& model) {
    const std::vector<double> probs = model.predict(x0_generated);
    if (probs.size() != cond.contour.size())
        throw ShapeError("reward_loss: reward model output has " + std::to_string(probs.size()) +
                         " pixels, contour has " + std::to_string(cond.contour.size()));
    std::vector<double> targets(cond.contour.data().begin(), cond.contour.data().end());
    return binary_cross_entropy(targets, probs);
}

inline double total_loss(double train, double reward, double lambda) {
    if (!std::isfinite(train) || !std::isfinite(reward) || !std::isfinite(lambda))
        throw NonFiniteError("total_loss: non-finite input");
    if (train < 0.0 || reward < 0.0 || lambda < 0.0) throw DomainError("total_loss: inputs must be nonnegative");
    return train + lambda * reward;
}

}  // namespace mural
