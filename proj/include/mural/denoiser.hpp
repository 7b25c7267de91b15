// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mural/core/kv.hpp"
#include "mural/core/parallel.hpp"
#include "mural/core/rng.hpp"
#include "mural/diffusion.hpp"
#include "mural/image.hpp"
#include "mural/nn/layers.hpp"

namespace mural {

struct DenoiserConfig {
    int image_channels = 3;
    int base_channels = 32;
    int depth = 2;  // resolution levels; level l has base_channels * 2^l channels
    int heads = 4;
    int head_dim = 0;  // 0: channels at the attention level / heads
    int time_embed_dim = 32;
    int tag_vocab = 4;

    int channels_at(int level) const { return base_channels << level; }
    int attention_channels() const { return channels_at(depth - 1); }

    void validate() const {
        if (image_channels != 1 && image_channels != 3) throw ConfigError("denoiser: image_channels must be 1 or 3");
        if (base_channels < 1) throw ConfigError("denoiser: base_channels must be >= 1");
        if (depth < 1 || depth > 5) throw ConfigError("denoiser: depth must lie in [1,5]");
        if (time_embed_dim < 2 || time_embed_dim % 2) throw ConfigError("denoiser: time_embed_dim must be even and >= 2");
        if (tag_vocab < 0) throw ConfigError("denoiser: tag_vocab must be >= 0");
        try {
            nn::msa_head_dim(attention_channels(), heads, head_dim);
        } catch (const DomainError& e) {
            throw ConfigError(std::string("denoiser: ") + e.what());
        }
    }

    // Spatial sizes must survive depth-1 poolings plus the attention pooling.
    int size_multiple() const { return 1 << depth; }

    std::string to_text() const {
        return "image_channels = " + std::to_string(image_channels) + "\nbase_channels = " +
               std::to_string(base_channels) + "\ndepth = " + std::to_string(depth) + "\nheads = " +
               std::to_string(heads) + "\nhead_dim = " + std::to_string(head_dim) + "\ntime_embed_dim = " +
               std::to_string(time_embed_dim) + "\ntag_vocab = " + std::to_string(tag_vocab) + "\n";
    }

    static DenoiserConfig from_kv(const KeyValues& kv) {
        DenoiserConfig c;
        c.image_channels = static_cast<int>(kv.integer("image_channels"));
        c.base_channels = static_cast<int>(kv.integer("base_channels"));
        c.depth = static_cast<int>(kv.integer("depth"));
        c.heads = static_cast<int>(kv.integer("heads"));
        c.head_dim = static_cast<int>(kv.integer("head_dim"));
        c.time_embed_dim = static_cast<int>(kv.integer("time_embed_dim"));
        c.tag_vocab = static_cast<int>(kv.integer("tag_vocab"));
        c.validate();
        return c;
    }
};

// Common surface of anything that predicts noise at a fixed native resolution.
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    virtual int native_height() const = 0;
    virtual int native_width() const = 0;
    // xt and cond at native resolution; t is the model (training) timestep.
    virtual LatentImage predict(const LatentImage& xt, int t, const ConditionSet& cond) const = 0;
};

namespace detail {

// LatentImage (HWC) -> [C,H,W]
inline nn::Tensor to_chw(const LatentImage& img) {
    const int H = img.height(), W = img.width(), C = img.channels();
    nn::Tensor t({C, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c) t.data[(static_cast<std::size_t>(c) * H + y) * W + x] = img(y, x, c);
    return t;
}

inline LatentImage from_chw(const nn::Tensor& t) {
    const int C = t.dim(0), H = t.dim(1), W = t.dim(2);
    std::vector<double> v(t.size());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c)
                v[(static_cast<std::size_t>(y) * W + x) * C + c] = t.data[(static_cast<std::size_t>(c) * H + y) * W + x];
    return LatentImage(H, W, C, std::move(v));
}

inline nn::Tensor mask_plane(const ContourMask& m) {
    nn::Tensor t({1, m.height(), m.width()});
    for (std::size_t i = 0; i < m.size(); ++i) t.data[i] = m.data()[i];
    return t;
}

}  // namespace detail

// Contour-conditioned encoder/decoder with spatial attention at the deepest level.
class Denoiser final : public NoisePredictor {
public:
    Denoiser(DenoiserConfig cfg, int height, int width, std::uint64_t seed) : cfg_(cfg), h_(height), w_(width) {
        check_geometry();
        Rng rng(seed);
        init(rng);
    }

    Denoiser(DenoiserConfig cfg, int height, int width, nn::ParameterStore params)
        : cfg_(cfg), h_(height), w_(width), params_(std::move(params)) {
        check_geometry();
        Rng rng(0);
        nn::ParameterStore expected;
        build(expected, rng);
        for (const auto& [name, p] : expected) {
            if (!params_.contains(name)) throw CheckpointError("denoiser checkpoint lacks parameter '" + name + "'");
            if (params_.at(name).value.shape != p.value.shape)
                throw CheckpointError("denoiser parameter '" + name + "' has shape " +
                                      params_.at(name).value.shape_str() + ", expected " + p.value.shape_str());
        }
        if (expected.size() != params_.size()) throw CheckpointError("denoiser checkpoint has unexpected parameters");
    }

    int native_height() const override { return h_; }
    int native_width() const override { return w_; }
    const DenoiserConfig& config() const { return cfg_; }
    nn::ParameterStore& params() { return params_; }
    const nn::ParameterStore& params() const { return params_; }

    // Builds the forward graph. `xt` is [C,H,W]; returns the [C,H,W] noise estimate.
    nn::Var forward(nn::Binder& p, nn::Var xt, int t, const ConditionSet& cond,
                    std::vector<nn::Var>* attention = nullptr) const {
        nn::Tape& tape = p.tape();
        const nn::Tensor& X = tape.value(xt);
        if (X.rank() != 3 || X.dim(0) != cfg_.image_channels || X.dim(1) != h_ || X.dim(2) != w_)
            throw ShapeError("denoiser: input " + X.shape_str() + " does not match native scale " +
                             std::to_string(h_) + "x" + std::to_string(w_));
        cond.validate(h_, w_);
        const int tag = tag_index(cond);

        nn::Var emb = nn::time_mlp(p, t, cfg_.time_embed_dim, "time");
        emb = nn::add(tape, emb, nn::embedding(tape, p("tag.table"), tag));
        const nn::Var emb_act = nn::silu(tape, emb);

        nn::Var h = nn::conv(p, nn::concat(tape, {xt, tape.constant(detail::mask_plane(cond.contour))}), "in");
        std::vector<nn::Var> skips;
        for (int l = 0; l < cfg_.depth; ++l) {
            const std::string n = "down" + std::to_string(l);
            h = nn::resblock(p, h, emb_act, n + ".res");
            if (l + 1 < cfg_.depth) {
                skips.push_back(h);
                h = nn::conv(p, nn::avgpool2(tape, h), n + ".to");
            }
        }
        h = nn::msa(p, h, "mid.msa", cfg_.heads, attention);
        h = nn::resblock(p, h, emb_act, "mid.res");
        for (int l = cfg_.depth - 2; l >= 0; --l) {
            const std::string n = "up" + std::to_string(l);
            h = nn::conv(p, nn::upsample2(tape, h), n + ".from");
            h = nn::conv(p, nn::concat(tape, {h, skips[l]}), n + ".merge");
            h = nn::resblock(p, h, emb_act, n + ".res");
        }
        return nn::conv(p, nn::silu(tape, h), "out");
    }

    LatentImage predict(const LatentImage& xt, int t, const ConditionSet& cond) const override {
        if (xt.height() != h_ || xt.width() != w_ || xt.channels() != cfg_.image_channels)
            throw ShapeError("denoiser: input " + xt.shape().str() + " does not match native scale " +
                             std::to_string(h_) + "x" + std::to_string(w_) + "x" + std::to_string(cfg_.image_channels));
        nn::Tape tape(false);
        nn::Binder p(tape, params_, false);
        const nn::Var out = forward(p, tape.constant(detail::to_chw(xt)), t, cond);
        return detail::from_chw(tape.value(out));
    }

    // Identifies architecture and native scale; part of every checkpoint hash.
    std::string describe() const {
        return "model = denoiser\n" + cfg_.to_text() + "height = " + std::to_string(h_) + "\nwidth = " +
               std::to_string(w_) + "\n";
    }

private:
    int tag_index(const ConditionSet& cond) const {
        if (!cond.tag) return 0;
        if (*cond.tag < 0 || *cond.tag >= cfg_.tag_vocab)
            throw DomainError("denoiser: style tag " + std::to_string(*cond.tag) + " outside vocabulary of " +
                              std::to_string(cfg_.tag_vocab));
        return *cond.tag + 1;
    }

    void check_geometry() const {
        cfg_.validate();
        const int m = cfg_.size_multiple();
        if (h_ < m || w_ < m || h_ % m || w_ % m)
            throw ConfigError("denoiser: native size " + std::to_string(h_) + "x" + std::to_string(w_) +
                              " must be a positive multiple of " + std::to_string(m) + " for depth " +
                              std::to_string(cfg_.depth));
    }

    void init(Rng& rng) { build(params_, rng); }

    void build(nn::ParameterStore& s, Rng& rng) const {
        const int D = cfg_.time_embed_dim;
        nn::add_time_mlp(s, "time", D, rng);
        s.add("tag.table", nn::Tensor::uniform({cfg_.tag_vocab + 1, D}, 0.1, rng));
        nn::add_conv(s, "in", cfg_.image_channels + 1, cfg_.channels_at(0), 3, rng);
        for (int l = 0; l < cfg_.depth; ++l) {
            const std::string n = "down" + std::to_string(l);
            nn::add_resblock(s, n + ".res", cfg_.channels_at(l), D, rng);
            if (l + 1 < cfg_.depth) nn::add_conv(s, n + ".to", cfg_.channels_at(l), cfg_.channels_at(l + 1), 3, rng);
        }
        const int top = cfg_.attention_channels();
        nn::add_msa(s, "mid.msa", top, cfg_.heads, cfg_.head_dim, rng);
        nn::add_resblock(s, "mid.res", top, D, rng);
        for (int l = cfg_.depth - 2; l >= 0; --l) {
            const std::string n = "up" + std::to_string(l);
            nn::add_conv(s, n + ".from", cfg_.channels_at(l + 1), cfg_.channels_at(l), 3, rng);
            nn::add_conv(s, n + ".merge", 2 * cfg_.channels_at(l), cfg_.channels_at(l), 3, rng);
            nn::add_resblock(s, n + ".res", cfg_.channels_at(l), D, rng);
        }
        nn::add_conv(s, "out", cfg_.channels_at(0), cfg_.image_channels, 3, rng, 0.1);
    }

    DenoiserConfig cfg_;
    int h_, w_;
    nn::ParameterStore params_;
};

// One training example at the model's native scale. x0 lives in [-1,1].
struct TrainingSample {
    LatentImage x0;
    ConditionSet cond;
};

struct LossTerms {
    nn::Var total;
    double train = 0.0;
    double reward = 0.0;
};

struct RewardOptions {
    double temperature = 0.05;
};

// Diffusion MSE plus lambda * BCE between the contour and the soft contour of
// the single-step clean estimate, all on one tape.
inline LossTerms denoiser_loss(nn::Binder& p, const Denoiser& model, const TrainingSample& s, int t,
                               const LatentImage& eps, const NoiseSchedule& sched, const RewardOptions& ro = {}) {
    nn::Tape& tape = p.tape();
    const LatentImage xt_img = forward_diffuse(s.x0, t, eps, sched);
    const nn::Var xt = tape.constant(detail::to_chw(xt_img));
    const nn::Var eps_hat = model.forward(p, xt, sched.model_timestep(t), s.cond);
    LossTerms out;
    const nn::Var train = nn::mse(tape, eps_hat, detail::to_chw(eps));
    out.train = tape.value(train).data[0];
    out.total = train;
    if (s.cond.lambda > 0.0) {
        const double ab = sched.alpha_bar(t);
        const nn::Tensor& XT = tape.value(xt);
        nn::Tensor off(XT.shape);
        for (std::size_t i = 0; i < off.size(); ++i) off.data[i] = XT.data[i] / std::sqrt(ab);
        nn::Var x0_hat = nn::affine(tape, eps_hat, -std::sqrt(1.0 - ab) / std::sqrt(ab), off);
        x0_hat = nn::clamp(tape, x0_hat, -1.0, 1.0);
        nn::Var img = nn::affine(tape, x0_hat, 0.5, nn::Tensor::filled(XT.shape, 0.5));
        nn::Var lum = nn::luminance(tape, img);
        const nn::Tensor& L = tape.value(lum);
        const double inv_t = 1.0 / ro.temperature;
        nn::Var prob = nn::sigmoid(
            tape, nn::affine(tape, lum, -inv_t, nn::Tensor::filled(L.shape, s.cond.reward_threshold * inv_t)));
        const nn::Var reward = nn::bce(tape, prob, detail::mask_plane(s.cond.contour), kProbabilityClamp);
        out.reward = tape.value(reward).data[0];
        out.total = nn::add(tape, train, nn::scale(tape, reward, s.cond.lambda));
    }
    return out;
}

struct TrainStepResult {
    double loss = 0.0;  // mean total loss before the update
    double train = 0.0;
    double reward = 0.0;
};

using GradientMap = std::map<std::string, nn::Tensor>;

namespace detail {

inline void require_finite_grads(const GradientMap& g, const char* context) {
    for (const auto& [name, t] : g)
        if (!t.all_finite()) throw NonFiniteError(std::string(context) + ": gradient of '" + name + "' is non-finite");
}

// Sums per-sample gradients in sample order into the store, scaled by 1/n.
inline void reduce_gradients(nn::ParameterStore& store, const std::vector<GradientMap>& per_sample) {
    store.zero_grad();
    const double inv = 1.0 / static_cast<double>(per_sample.size());
    for (const auto& g : per_sample)
        for (const auto& [name, t] : g) {
            auto& dst = store.at(name).grad.data;
            for (std::size_t i = 0; i < t.size(); ++i) dst[i] += inv * t.data[i];
        }
}

}  // namespace detail

// Per-sample gradients keyed by parameter name.
inline GradientMap collect_gradients(const nn::Tape& tape, const std::map<std::string, nn::Var>& bound) {
    GradientMap g;
    for (const auto& [name, v] : bound) g.emplace(name, tape.grad(v));
    return g;
}

// One optimizer update over a batch. Timesteps and noise are drawn from `rng`
// in sample order before any work is split across threads.
inline TrainStepResult train_step(Denoiser& model, const std::vector<TrainingSample>& batch,
                                  const NoiseSchedule& sched, nn::Adam& opt, Rng& rng, int threads = 1,
                                  const RewardOptions& ro = {}) {
    if (batch.empty()) throw DomainError("train_step: empty batch");
    std::vector<int> ts(batch.size());
    std::vector<LatentImage> eps;
    eps.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& x0 = batch[i].x0;
        if (x0.height() != model.native_height() || x0.width() != model.native_width())
            throw ShapeError("train_step: sample " + std::to_string(i) + " is " + x0.shape().str() +
                             ", model scale is " + std::to_string(model.native_height()) + "x" +
                             std::to_string(model.native_width()));
        ts[i] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
        std::vector<double> e(x0.size());
        for (double& v : e) v = rng.normal();
        eps.emplace_back(x0.shape(), std::move(e));
    }

    std::vector<GradientMap> grads(batch.size());
    std::vector<double> total(batch.size()), train(batch.size()), reward(batch.size());
    parallel_for(batch.size(), threads, [&](std::size_t i) {
        nn::Tape tape;
        nn::Binder p(tape, model.params(), true);
        const LossTerms lt = denoiser_loss(p, model, batch[i], ts[i], eps[i], sched, ro);
        total[i] = tape.value(lt.total).data[0];
        train[i] = lt.train;
        reward[i] = lt.reward;
        if (!std::isfinite(total[i]))
            throw NonFiniteError("train_step: loss is non-finite for sample " + std::to_string(i) + " at t=" +
                                 std::to_string(ts[i]));
        tape.backward(lt.total);
        grads[i] = collect_gradients(tape, p.bound());
        detail::require_finite_grads(grads[i], "train_step");
    });
    detail::reduce_gradients(model.params(), grads);
    opt.step(model.params());
    model.params().check_finite("train_step");

    TrainStepResult r;
    r.loss = pairwise_sum(total) / static_cast<double>(batch.size());
    r.train = pairwise_sum(train) / static_cast<double>(batch.size());
    r.reward = pairwise_sum(reward) / static_cast<double>(batch.size());
    return r;
}

}  // namespace mural
