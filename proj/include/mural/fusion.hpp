// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mural/core/kv.hpp"
#include "mural/core/parallel.hpp"
#include "mural/core/rng.hpp"
#include "mural/denoiser.hpp"
#include "mural/diffusion.hpp"
#include "mural/image.hpp"
#include "mural/nn/layers.hpp"

namespace mural {

struct DiffuserConfig {
    int image_channels = 3;
    int channels = 8;
    int time_embed_dim = 16;

    void validate() const {
        if (image_channels != 1 && image_channels != 3) throw ConfigError("diffuser: image_channels must be 1 or 3");
        if (channels < 1) throw ConfigError("diffuser: channels must be >= 1");
        if (time_embed_dim < 2 || time_embed_dim % 2) throw ConfigError("diffuser: time_embed_dim must be even and >= 2");
    }

    std::string to_text() const {
        return "image_channels = " + std::to_string(image_channels) + "\nchannels = " + std::to_string(channels) +
               "\ntime_embed_dim = " + std::to_string(time_embed_dim) + "\n";
    }

    static DiffuserConfig from_kv(const KeyValues& kv) {
        DiffuserConfig c;
        c.image_channels = static_cast<int>(kv.integer("image_channels"));
        c.channels = static_cast<int>(kv.integer("channels"));
        c.time_embed_dim = static_cast<int>(kv.integer("time_embed_dim"));
        c.validate();
        return c;
    }
};

// Shallow encoder/decoder emitting one raw influence logit per pixel.
class DynamicDiffuser {
public:
    DynamicDiffuser(DiffuserConfig cfg, int height, int width, std::uint64_t seed) : cfg_(cfg), h_(height), w_(width) {
        check_geometry();
        Rng rng(seed);
        build(params_, rng);
    }

    DynamicDiffuser(DiffuserConfig cfg, int height, int width, nn::ParameterStore params)
        : cfg_(cfg), h_(height), w_(width), params_(std::move(params)) {
        check_geometry();
        Rng rng(0);
        nn::ParameterStore expected;
        build(expected, rng);
        for (const auto& [name, p] : expected)
            if (!params_.contains(name) || params_.at(name).value.shape != p.value.shape)
                throw CheckpointError("diffuser checkpoint lacks or misshapes parameter '" + name + "'");
        if (expected.size() != params_.size()) throw CheckpointError("diffuser checkpoint has unexpected parameters");
    }

    int height() const { return h_; }
    int width() const { return w_; }
    const DiffuserConfig& config() const { return cfg_; }
    nn::ParameterStore& params() { return params_; }
    const nn::ParameterStore& params() const { return params_; }

    // xt: [C,H,W] at canonical resolution -> [1,H,W]
    nn::Var forward(nn::Binder& p, nn::Var xt, int t, const ConditionSet& cond) const {
        nn::Tape& tape = p.tape();
        const nn::Tensor& X = tape.value(xt);
        if (X.rank() != 3 || X.dim(0) != cfg_.image_channels || X.dim(1) != h_ || X.dim(2) != w_)
            throw ShapeError("diffuser: input " + X.shape_str() + " does not match canonical resolution " +
                             std::to_string(h_) + "x" + std::to_string(w_));
        cond.validate(h_, w_);
        const nn::Var emb_act = nn::silu(tape, nn::time_mlp(p, t, cfg_.time_embed_dim, "time"));
        const nn::Var h0 =
            nn::conv(p, nn::concat(tape, {xt, tape.constant(detail::mask_plane(cond.contour))}), "in");
        const nn::Var skip = nn::resblock(p, h0, emb_act, "enc");
        nn::Var h = nn::conv(p, nn::avgpool2(tape, skip), "down");
        h = nn::resblock(p, h, emb_act, "mid");
        h = nn::conv(p, nn::upsample2(tape, h), "up");
        h = nn::conv(p, nn::concat(tape, {h, skip}), "merge");
        return nn::conv(p, nn::silu(tape, h), "head");
    }

    std::string describe() const {
        return "model = diffuser\n" + cfg_.to_text() + "height = " + std::to_string(h_) + "\nwidth = " +
               std::to_string(w_) + "\n";
    }

private:
    void check_geometry() const {
        cfg_.validate();
        if (h_ < 2 || w_ < 2 || h_ % 2 || w_ % 2)
            throw ConfigError("diffuser: canonical size must be even, got " + std::to_string(h_) + "x" +
                              std::to_string(w_));
    }

    void build(nn::ParameterStore& s, Rng& rng) const {
        const int c = cfg_.channels, D = cfg_.time_embed_dim;
        nn::add_time_mlp(s, "time", D, rng);
        nn::add_conv(s, "in", cfg_.image_channels + 1, c, 3, rng);
        nn::add_resblock(s, "enc", c, D, rng);
        nn::add_conv(s, "down", c, 2 * c, 3, rng);
        nn::add_resblock(s, "mid", 2 * c, D, rng);
        nn::add_conv(s, "up", 2 * c, c, 3, rng);
        nn::add_conv(s, "merge", 2 * c, c, 3, rng);
        // Zero head: every scale starts with equal influence.
        s.add("head.w", nn::Tensor({1, c, 3, 3}));
        s.add("head.b", nn::Tensor({1}));
    }

    DiffuserConfig cfg_;
    int h_, w_;
    nn::ParameterStore params_;
};

// N maps of size H x W stored scale-major.
struct InfluenceStack {
    int count = 0, height = 0, width = 0;
    std::vector<double> values;

    InfluenceStack() = default;
    InfluenceStack(int n, int h, int w) : count(n), height(h), width(w), values(static_cast<std::size_t>(n) * h * w) {}

    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
    double& at(int n, int y, int x) { return values[n * plane() + static_cast<std::size_t>(y) * width + x]; }
    double at(int n, int y, int x) const { return values[n * plane() + static_cast<std::size_t>(y) * width + x]; }
    Image map(int n) const {
        std::vector<double> v(values.begin() + static_cast<std::ptrdiff_t>(n * plane()),
                              values.begin() + static_cast<std::ptrdiff_t>((n + 1) * plane()));
        return Image(height, width, 1, std::move(v));
    }
};

inline InfluenceStack stack_maps(const std::vector<std::vector<double>>& maps, int height, int width) {
    if (maps.empty()) throw DomainError("influence: need at least one map");
    InfluenceStack s(static_cast<int>(maps.size()), height, width);
    for (std::size_t n = 0; n < maps.size(); ++n) {
        if (maps[n].size() != s.plane()) throw ShapeError("influence: map " + std::to_string(n) + " has wrong size");
        std::copy(maps[n].begin(), maps[n].end(), s.values.begin() + static_cast<std::ptrdiff_t>(n * s.plane()));
    }
    return s;
}

// Raw influence map of one diffuser, at canonical resolution.
inline std::vector<double> influence(const DynamicDiffuser& d, const LatentImage& xt, int t, const ConditionSet& cond) {
    if (xt.height() != d.height() || xt.width() != d.width())
        throw ShapeError("influence: x_t is " + xt.shape().str() + ", diffuser expects " + std::to_string(d.height()) +
                         "x" + std::to_string(d.width()));
    nn::Tape tape(false);
    nn::Binder p(tape, d.params(), false);
    const nn::Var out = d.forward(p, tape.constant(detail::to_chw(xt)), t, cond);
    const auto& v = tape.value(out).data;
    for (double x : v)
        if (!std::isfinite(x)) throw NonFiniteError("influence: non-finite raw influence at t=" + std::to_string(t));
    return v;
}

// Per-pixel softmax across scales, max-subtracted.
inline InfluenceStack normalize_influence(const InfluenceStack& raw) {
    if (raw.count < 1) throw DomainError("normalize_influence: need at least one map");
    for (double v : raw.values)
        if (!std::isfinite(v)) throw NonFiniteError("normalize_influence: non-finite raw influence");
    InfluenceStack out(raw.count, raw.height, raw.width);
    const std::size_t P = raw.plane();
    for (std::size_t p = 0; p < P; ++p) {
        double mx = raw.values[p];
        for (int n = 1; n < raw.count; ++n) mx = std::max(mx, raw.values[n * P + p]);
        double s = 0.0;
        for (int n = 0; n < raw.count; ++n) s += (out.values[n * P + p] = std::exp(raw.values[n * P + p] - mx));
        for (int n = 0; n < raw.count; ++n) out.values[n * P + p] /= s;
    }
    return out;
}

inline InfluenceStack uniform_influence(int n, int h, int w) {
    InfluenceStack s(n, h, w);
    std::fill(s.values.begin(), s.values.end(), 1.0 / n);
    return s;
}

inline constexpr double kInfluenceSumTolerance = 1e-5;

// eps = sum_n I_n (.) eps_n, per pixel and channel.
inline LatentImage fuse_eps(const InfluenceStack& weights, const std::vector<LatentImage>& preds) {
    if (weights.count < 1 || static_cast<int>(preds.size()) != weights.count)
        throw ShapeError("fuse_eps: " + std::to_string(preds.size()) + " predictions for " +
                         std::to_string(weights.count) + " influence maps");
    const Shape shape = preds[0].shape();
    if (shape.height != weights.height || shape.width != weights.width)
        throw ShapeError("fuse_eps: influence maps do not match prediction resolution");
    for (const auto& p : preds)
        if (p.shape() != shape) throw ShapeError("fuse_eps: predictions differ in shape");
    const std::size_t P = weights.plane();
    for (std::size_t p = 0; p < P; ++p) {
        double s = 0.0;
        for (int n = 0; n < weights.count; ++n) s += weights.values[n * P + p];
        if (std::abs(s - 1.0) > kInfluenceSumTolerance)
            throw DomainError("fuse_eps: influence weights sum to " + std::to_string(s) + " at pixel " +
                              std::to_string(p));
    }
    const int C = shape.channels;
    std::vector<double> out(preds[0].size(), 0.0);
    for (std::size_t p = 0; p < P; ++p)
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int n = 0; n < weights.count; ++n) acc += weights.values[n * P + p] * preds[n].data()[p * C + c];
            out[p * C + c] = acc;
        }
    return LatentImage(shape, std::move(out));
}

// Frozen per-scale predictors plus optional dynamic diffusers (none: uniform fusion).
struct Collaborators {
    std::vector<const NoisePredictor*> predictors;
    std::vector<const DynamicDiffuser*> diffusers;

    int count() const { return static_cast<int>(predictors.size()); }

    // The finest predictor fixes the canonical resolution.
    int canonical_index() const {
        int best = 0;
        for (int i = 1; i < count(); ++i)
            if (predictors[i]->native_height() * predictors[i]->native_width() >
                predictors[best]->native_height() * predictors[best]->native_width())
                best = i;
        return best;
    }
    int canonical_height() const { return predictors.at(canonical_index())->native_height(); }
    int canonical_width() const { return predictors.at(canonical_index())->native_width(); }

    void validate() const {
        if (predictors.empty()) throw DomainError("collaborators: need at least one predictor");
        for (auto* p : predictors)
            if (!p) throw DomainError("collaborators: null predictor");
        if (!diffusers.empty()) {
            if (diffusers.size() != predictors.size())
                throw DomainError("collaborators: " + std::to_string(diffusers.size()) + " diffusers for " +
                                  std::to_string(predictors.size()) + " predictors");
            for (auto* d : diffusers)
                if (!d || d->height() != canonical_height() || d->width() != canonical_width())
                    throw ShapeError("collaborators: diffuser resolution differs from the canonical resolution");
        }
    }
};

// Per-scale views of x_t, predictions aligned back to canonical resolution.
inline std::vector<LatentImage> aligned_predictions(const Collaborators& co, const LatentImage& xt, int model_t,
                                                    const std::vector<ConditionSet>& conds, unsigned threads = 1) {
    const int H = xt.height(), W = xt.width();
    std::vector<LatentImage> out(co.count(), LatentImage(H, W, xt.channels()));
    parallel_for(static_cast<std::size_t>(co.count()), threads, [&](std::size_t n) {
        const NoisePredictor& p = *co.predictors[n];
        const int h = p.native_height(), w = p.native_width();
        const bool same = h == H && w == W;
        const LatentImage view = same ? xt : resample(xt, h, w, ResampleMode::bilinear);
        const LatentImage eps = p.predict(view, model_t, conds[n]);
        out[n] = same ? eps : resample(eps, H, W, ResampleMode::bilinear);
    });
    return out;
}

inline InfluenceStack fused_weights(const Collaborators& co, const LatentImage& xt, int model_t,
                                    const ConditionSet& canonical_cond) {
    if (co.diffusers.empty()) return uniform_influence(co.count(), xt.height(), xt.width());
    std::vector<std::vector<double>> raw;
    for (const auto* d : co.diffusers) raw.push_back(influence(*d, xt, model_t, canonical_cond));
    return normalize_influence(stack_maps(raw, xt.height(), xt.width()));
}

struct SampleRequest {
    std::vector<ConditionSet> conditions;  // one per predictor, at its native resolution
    ConditionSet canonical_condition;      // for the diffusers
    std::optional<LatentImage> known;      // canonical, latent range
    std::optional<ContourMask> missing;    // 1 where pixels must be generated
};

struct SampleOptions {
    std::uint64_t seed = 0;
    bool harmonize = true;  // re-impose the noised known region after every step
    unsigned threads = 1;
    std::function<void(int t, const InfluenceStack&)> on_influence;
};

// Runs t = T..1 on one canonical chain. Random draws: x_T first, then per step
// the step noise followed by the harmonization noise.
inline LatentImage collaborative_chain(const Collaborators& co, const SampleRequest& req, const NoiseSchedule& sched,
                                       const SampleOptions& opt) {
    co.validate();
    const int H = co.canonical_height(), W = co.canonical_width();
    const int C = [&] {
        if (req.known) return req.known->channels();
        return 3;
    }();
    if (static_cast<int>(req.conditions.size()) != co.count())
        throw DomainError("collaborative_sample: " + std::to_string(req.conditions.size()) + " conditions for " +
                          std::to_string(co.count()) + " scales");
    for (int n = 0; n < co.count(); ++n)
        req.conditions[n].validate(co.predictors[n]->native_height(), co.predictors[n]->native_width());
    if (!co.diffusers.empty()) req.canonical_condition.validate(H, W);
    const bool harmonize = opt.harmonize && req.known && req.missing;
    if (req.known && (req.known->height() != H || req.known->width() != W))
        throw ShapeError("collaborative_sample: known image is " + req.known->shape().str() + ", canonical is " +
                         std::to_string(H) + "x" + std::to_string(W));
    if (req.missing && !req.missing->same_shape(H, W)) throw ShapeError("collaborative_sample: mask size mismatch");

    Rng rng(opt.seed);
    auto gaussian = [&](int h, int w, int c) {
        std::vector<double> v(static_cast<std::size_t>(h) * w * c);
        for (double& x : v) x = rng.normal();
        return LatentImage(h, w, c, std::move(v));
    };
    LatentImage x = gaussian(H, W, C);
    for (int t = sched.steps(); t >= 1; --t) {
        const int mt = sched.model_timestep(t);
        const auto preds = aligned_predictions(co, x, mt, req.conditions, opt.threads);
        const InfluenceStack w = fused_weights(co, x, mt, req.canonical_condition);
        if (opt.on_influence) opt.on_influence(t, w);
        const LatentImage eps = fuse_eps(w, preds);
        const LatentImage noise = t > 1 ? gaussian(H, W, C) : LatentImage(H, W, C);
        x = reverse_step(x, t, eps, sched, noise);
        if (harmonize) {
            const LatentImage z = t > 1 ? gaussian(H, W, C) : LatentImage(H, W, C);
            const LatentImage known_t = forward_diffuse(*req.known, t - 1, z, sched);
            auto d = x.mutable_data();
            for (std::size_t p = 0; p < req.missing->size(); ++p)
                if (!req.missing->data()[p])
                    for (int c = 0; c < C; ++c) d[p * C + c] = known_t.data()[p * C + c];
        }
        for (double v : x.data())
            if (!std::isfinite(v)) throw NonFiniteError("collaborative_sample: non-finite state at t=" + std::to_string(t));
    }
    return x;
}

// Samples, then copies known pixels from the damaged original; result in [0,1].
inline Image collaborative_sample(const Collaborators& co, const SampleRequest& req, const NoiseSchedule& sched,
                                  const SampleOptions& opt) {
    const LatentImage x = collaborative_chain(co, req, sched, opt);
    Image gen = to_image(x);
    if (!req.known || !req.missing) return gen;
    const Image known = to_image(*req.known);
    std::vector<double> v(gen.values());
    const int C = gen.channels();
    for (std::size_t p = 0; p < req.missing->size(); ++p)
        if (!req.missing->data()[p])
            for (int c = 0; c < C; ++c) v[p * C + c] = known.data()[p * C + c];
    return Image(gen.shape(), std::move(v));
}

// Fused prediction on a tape with trainable diffusers and constant predictions.
inline nn::Var fuse_on_tape(std::vector<nn::Binder>& binders, const std::vector<const DynamicDiffuser*>& diffusers,
                            nn::Var xt, int model_t, const ConditionSet& cond, const std::vector<nn::Tensor>& preds) {
    nn::Tape& tape = binders.at(0).tape();
    std::vector<nn::Var> raw;
    for (std::size_t n = 0; n < diffusers.size(); ++n)
        raw.push_back(diffusers[n]->forward(binders[n], xt, model_t, cond));
    return nn::weighted_fuse(tape, nn::softmax_channels(tape, nn::concat(tape, raw)), preds);
}

// One canonical training example for the diffusers.
struct FusionSample {
    LatentImage x0;                   // canonical, latent range
    std::vector<ConditionSet> conds;  // per scale
    ConditionSet canonical_cond;
};

struct DiffuserTrainOptions {
    int steps = 100;
    int batch = 4;
    nn::AdamOptions adam{1e-3};
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::function<void(int step, double loss)> on_step;
};

// Batch loss of the fused prediction (no update). Used for held-out comparisons.
inline double fusion_loss(const Collaborators& co, const std::vector<FusionSample>& data, const NoiseSchedule& sched,
                          std::uint64_t seed, unsigned threads = 1) {
    Rng rng(seed);
    std::vector<double> losses;
    for (const auto& s : data) {
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
        std::vector<double> e(s.x0.size());
        for (double& v : e) v = rng.normal();
        const LatentImage eps(s.x0.shape(), std::move(e));
        const LatentImage xt = forward_diffuse(s.x0, t, eps, sched);
        const int mt = sched.model_timestep(t);
        const auto preds = aligned_predictions(co, xt, mt, s.conds, threads);
        const LatentImage fused = fuse_eps(fused_weights(co, xt, mt, s.canonical_cond), preds);
        losses.push_back(diffusion_loss(fused, eps));
    }
    return pairwise_sum(losses) / static_cast<double>(losses.size());
}

// Optimizes only the diffusers; predictors are read through const handles.
// Returns the per-step mean loss trace.
inline std::vector<double> train_diffusers(std::vector<DynamicDiffuser*> diffusers,
                                           const std::vector<const NoisePredictor*>& predictors,
                                           const std::vector<FusionSample>& data, const NoiseSchedule& sched,
                                           const DiffuserTrainOptions& opt) {
    if (data.empty()) throw DomainError("train_diffusers: empty dataset");
    if (diffusers.size() != predictors.size()) throw DomainError("train_diffusers: one diffuser per predictor required");
    Collaborators co;
    co.predictors = predictors;
    for (auto* d : diffusers) co.diffusers.push_back(d);
    co.validate();
    std::vector<nn::Adam> adams(diffusers.size(), nn::Adam(opt.adam));
    Rng rng(opt.seed);
    std::vector<double> trace;
    for (int step = 0; step < opt.steps; ++step) {
        const int B = std::min<int>(opt.batch, static_cast<int>(data.size()));
        std::vector<std::size_t> pick(B);
        std::vector<int> ts(B);
        std::vector<LatentImage> eps;
        for (int b = 0; b < B; ++b) {
            pick[b] = static_cast<std::size_t>(rng.below(data.size()));
            ts[b] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
            std::vector<double> e(data[pick[b]].x0.size());
            for (double& v : e) v = rng.normal();
            eps.emplace_back(data[pick[b]].x0.shape(), std::move(e));
        }
        std::vector<std::vector<GradientMap>> grads(B);
        std::vector<double> losses(B);
        parallel_for(static_cast<std::size_t>(B), opt.threads, [&](std::size_t b) {
            const FusionSample& s = data[pick[b]];
            const LatentImage xt = forward_diffuse(s.x0, ts[b], eps[b], sched);
            const int mt = sched.model_timestep(ts[b]);
            const auto aligned = aligned_predictions(co, xt, mt, s.conds);
            std::vector<nn::Tensor> preds;
            for (const auto& a : aligned) preds.push_back(detail::to_chw(a));
            nn::Tape tape;
            std::vector<nn::Binder> binders;
            for (auto* d : diffusers) binders.emplace_back(tape, d->params(), true);
            const nn::Var fused =
                fuse_on_tape(binders, co.diffusers, tape.constant(detail::to_chw(xt)), mt, s.canonical_cond, preds);
            const nn::Var loss = nn::mse(tape, fused, detail::to_chw(eps[b]));
            losses[b] = tape.value(loss).data[0];
            if (!std::isfinite(losses[b])) throw NonFiniteError("train_diffusers: non-finite loss at step " + std::to_string(step));
            tape.backward(loss);
            for (auto& bd : binders) {
                grads[b].push_back(collect_gradients(tape, bd.bound()));
                detail::require_finite_grads(grads[b].back(), "train_diffusers");
            }
        });
        for (std::size_t n = 0; n < diffusers.size(); ++n) {
            std::vector<GradientMap> per;
            for (int b = 0; b < B; ++b) per.push_back(std::move(grads[b][n]));
            detail::reduce_gradients(diffusers[n]->params(), per);
            adams[n].step(diffusers[n]->params());
            diffusers[n]->params().check_finite("train_diffusers");
        }
        trace.push_back(pairwise_sum(losses) / B);
        if (opt.on_step) opt.on_step(step, trace.back());
    }
    return trace;
}

}  // namespace mural
