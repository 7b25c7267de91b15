// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mural/core/error.hpp"
#include "mural/core/kv.hpp"
#include "mural/core/rng.hpp"
#include "mural/dataset.hpp"
#include "mural/denoiser.hpp"
#include "mural/diffusion.hpp"
#include "mural/fusion.hpp"
#include "mural/metrics.hpp"

namespace mural {

// Every tunable of a run. Loaded from flat `key = value` text; keys not listed
// in Config::fields() are rejected.
struct Config {
    std::string name = "default";
    std::uint64_t seed = 0;
    int threads = 0;  // 0: hardware concurrency; results do not depend on it

    // schedule
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    SigmaMode sigma_mode = SigmaMode::beta;
    int sample_steps = 0;  // 0: sample with every trained step
    bool harmonize = true;

    // conditioning
    double lambda_reward = 1.0;
    double reward_temperature = 0.05;

    // models
    std::vector<int> scales{16, 32, 64};
    int channels = 3;
    DenoiserConfig denoiser{};
    DiffuserConfig diffuser{};
    bool learned_fusion = true;

    // training
    int train_steps = 2000;
    int train_batch = 4;
    double train_lr = 1e-3;
    int diffuser_steps = 200;
    int diffuser_batch = 4;
    double diffuser_lr = 1e-3;

    // frequency-domain post filter
    bool fdp = true;
    int fdp_knots = 8;
    int fdp_steps = 50;
    int fdp_fit_images = 4;

    // metrics
    MetricParams metrics{};

    // synthetic data
    int train_murals = 64;
    int test_murals = 8;
    int mural_size = 64;
    int patch_size = 64;
    double patch_overlap = 0.5;
    double damage_min = 0.2;
    double damage_max = 0.6;

    int canonical_scale() const { return scales.empty() ? 0 : scales.back(); }

    NoiseSchedule schedule() const { return make_schedule(timesteps, beta_start, beta_end, sigma_mode); }
    NoiseSchedule sampling_schedule(int steps_override = 0) const {
        const int s = steps_override > 0 ? steps_override : (sample_steps > 0 ? sample_steps : timesteps);
        return respace(schedule(), s);
    }

    void validate() const;
    std::string to_text() const;
    // Fingerprint of everything that affects results (threads excluded).
    std::uint64_t hash() const;

    static Config from_kv(const KeyValues& kv);
    static Config from_text(const std::string& text, const std::string& origin = "<text>") {
        return from_kv(KeyValues::parse(text, origin));
    }
    static Config load(const std::filesystem::path& p) {
        std::ifstream f(p);
        if (!f) throw ConfigError("cannot read config " + p.string());
        std::stringstream ss;
        ss << f.rdbuf();
        return from_text(ss.str(), p.string());
    }

    // Applies one `key=value` override with the same checks as a file entry.
    void set(const std::string& key, const std::string& value) {
        KeyValues kv = KeyValues::parse(to_text());
        kv.set(key, value);
        *this = from_kv(kv);
    }

    struct Field {
        std::function<void(Config&, const KeyValues&, const std::string&)> read;
        std::function<std::string(const Config&)> write;
    };
    static const std::vector<std::pair<std::string, Field>>& fields();
};

// Small-scale settings: the three scales on 64x64 murals with a short chain.
inline Config smoke_config() {
    Config c;
    c.name = "smoke";
    c.timesteps = 50;
    c.beta_start = 2e-3;
    c.beta_end = 0.4;
    c.scales = {16, 32, 64};
    c.denoiser.base_channels = 16;
    c.denoiser.depth = 2;
    c.denoiser.heads = 2;
    c.denoiser.time_embed_dim = 16;
    c.diffuser.channels = 8;
    // With only 200 steps, a weaker reward and larger batches keep the noise
    // objective from being swamped.
    c.lambda_reward = 0.1;
    c.train_steps = 200;
    c.train_batch = 8;
    c.train_lr = 2e-3;
    c.diffuser_steps = 60;
    c.diffuser_batch = 2;
    c.train_murals = 64;
    c.test_murals = 8;
    c.fdp_fit_images = 2;
    return c;
}

namespace detail {

inline std::string fmt_double(double v) {
    std::ostringstream o;
    o << std::setprecision(17) << v;
    return o.str();
}

inline bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "on" || s == "true" || s == "1" || s == "yes") return true;
    if (s == "off" || s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("key '" + key + "': expected on/off, got '" + s + "'");
}

inline int to_int(const KeyValues& kv, const std::string& key) {
    const long long v = kv.integer(key);
    if (v < -(1ll << 31) || v >= (1ll << 31)) throw ConfigError("key '" + key + "' is out of range");
    return static_cast<int>(v);
}

template <class T, class Get>
Config::Field int_field(Get get) {
    return {[get](Config& c, const KeyValues& kv, const std::string& k) { get(c) = static_cast<T>(to_int(kv, k)); },
            [get](const Config& c) { return std::to_string(get(c)); }};
}

template <class Get>
Config::Field double_field(Get get) {
    return {[get](Config& c, const KeyValues& kv, const std::string& k) { get(c) = kv.number(k); },
            [get](const Config& c) { return fmt_double(get(c)); }};
}

template <class Get>
Config::Field bool_field(Get get) {
    return {[get](Config& c, const KeyValues& kv, const std::string& k) { get(c) = parse_bool(kv.raw(k), k); },
            [get](const Config& c) { return std::string(get(c) ? "on" : "off"); }};
}

}  // namespace detail

inline const std::vector<std::pair<std::string, Config::Field>>& Config::fields() {
    using namespace detail;
    static const std::vector<std::pair<std::string, Field>> f = [] {
        std::vector<std::pair<std::string, Field>> v;
        v.emplace_back("name", Field{[](Config& c, const KeyValues& kv, const std::string& k) { c.name = kv.raw(k); },
                                     [](const Config& c) { return "\"" + c.name + "\""; }});
        v.emplace_back("seed", Field{[](Config& c, const KeyValues& kv, const std::string& k) {
                                         const std::string s = kv.raw(k);
                                         std::size_t used = 0;
                                         try {
                                             c.seed = std::stoull(s, &used);
                                         } catch (const std::exception&) {
                                             used = 0;
                                         }
                                         if (used != s.size() || s.empty() || s[0] == '-')
                                             throw ConfigError("key 'seed': '" + s + "' is not an unsigned integer");
                                     },
                                     [](const Config& c) { return std::to_string(c.seed); }});
        v.emplace_back("threads", int_field<int>([](auto& c) -> auto& { return c.threads; }));
        v.emplace_back("timesteps", int_field<int>([](auto& c) -> auto& { return c.timesteps; }));
        v.emplace_back("beta_start", double_field([](auto& c) -> auto& { return c.beta_start; }));
        v.emplace_back("beta_end", double_field([](auto& c) -> auto& { return c.beta_end; }));
        v.emplace_back("sigma_mode",
                       Field{[](Config& c, const KeyValues& kv, const std::string& k) {
                                 c.sigma_mode = parse_sigma_mode(kv.raw(k));
                             },
                             [](const Config& c) { return to_string(c.sigma_mode); }});
        v.emplace_back("sample_steps", int_field<int>([](auto& c) -> auto& { return c.sample_steps; }));
        v.emplace_back("harmonize", bool_field([](auto& c) -> auto& { return c.harmonize; }));
        v.emplace_back("lambda_reward", double_field([](auto& c) -> auto& { return c.lambda_reward; }));
        v.emplace_back("reward_temperature", double_field([](auto& c) -> auto& { return c.reward_temperature; }));
        v.emplace_back("scales", Field{[](Config& c, const KeyValues& kv, const std::string& k) {
                                           c.scales.clear();
                                           for (double s : kv.numbers(k)) {
                                               if (s != static_cast<int>(s))
                                                   throw ConfigError("key 'scales': entries must be integers");
                                               c.scales.push_back(static_cast<int>(s));
                                           }
                                       },
                                       [](const Config& c) {
                                           std::string s;
                                           for (std::size_t i = 0; i < c.scales.size(); ++i)
                                               s += (i ? ", " : "") + std::to_string(c.scales[i]);
                                           return s;
                                       }});
        v.emplace_back("channels", int_field<int>([](auto& c) -> auto& { return c.channels; }));
        v.emplace_back("denoiser_base_channels",
                       int_field<int>([](auto& c) -> auto& { return c.denoiser.base_channels; }));
        v.emplace_back("denoiser_depth", int_field<int>([](auto& c) -> auto& { return c.denoiser.depth; }));
        v.emplace_back("denoiser_heads", int_field<int>([](auto& c) -> auto& { return c.denoiser.heads; }));
        v.emplace_back("denoiser_head_dim", int_field<int>([](auto& c) -> auto& { return c.denoiser.head_dim; }));
        v.emplace_back("denoiser_time_embed_dim",
                       int_field<int>([](auto& c) -> auto& { return c.denoiser.time_embed_dim; }));
        v.emplace_back("denoiser_tag_vocab", int_field<int>([](auto& c) -> auto& { return c.denoiser.tag_vocab; }));
        v.emplace_back("diffuser_channels", int_field<int>([](auto& c) -> auto& { return c.diffuser.channels; }));
        v.emplace_back("diffuser_time_embed_dim",
                       int_field<int>([](auto& c) -> auto& { return c.diffuser.time_embed_dim; }));
        v.emplace_back("fusion", Field{[](Config& c, const KeyValues& kv, const std::string& k) {
                                           const std::string s = kv.raw(k);
                                           if (s != "learned" && s != "uniform")
                                               throw ConfigError("key 'fusion': expected learned or uniform, got '" +
                                                                 s + "'");
                                           c.learned_fusion = s == "learned";
                                       },
                                       [](const Config& c) {
                                           return std::string(c.learned_fusion ? "learned" : "uniform");
                                       }});
        v.emplace_back("train_steps", int_field<int>([](auto& c) -> auto& { return c.train_steps; }));
        v.emplace_back("train_batch", int_field<int>([](auto& c) -> auto& { return c.train_batch; }));
        v.emplace_back("train_lr", double_field([](auto& c) -> auto& { return c.train_lr; }));
        v.emplace_back("diffuser_steps", int_field<int>([](auto& c) -> auto& { return c.diffuser_steps; }));
        v.emplace_back("diffuser_batch", int_field<int>([](auto& c) -> auto& { return c.diffuser_batch; }));
        v.emplace_back("diffuser_lr", double_field([](auto& c) -> auto& { return c.diffuser_lr; }));
        v.emplace_back("fdp", bool_field([](auto& c) -> auto& { return c.fdp; }));
        v.emplace_back("fdp_knots", int_field<int>([](auto& c) -> auto& { return c.fdp_knots; }));
        v.emplace_back("fdp_steps", int_field<int>([](auto& c) -> auto& { return c.fdp_steps; }));
        v.emplace_back("fdp_fit_images", int_field<int>([](auto& c) -> auto& { return c.fdp_fit_images; }));
        v.emplace_back("ssim_window", int_field<int>([](auto& c) -> auto& { return c.metrics.ssim.window; }));
        v.emplace_back("ssim_sigma", double_field([](auto& c) -> auto& { return c.metrics.ssim.sigma; }));
        v.emplace_back("ssim_c1", double_field([](auto& c) -> auto& { return c.metrics.ssim.c1; }));
        v.emplace_back("ssim_c2", double_field([](auto& c) -> auto& { return c.metrics.ssim.c2; }));
        v.emplace_back("color_bins", int_field<int>([](auto& c) -> auto& { return c.metrics.color.bins; }));
        v.emplace_back("color_normalize", bool_field([](auto& c) -> auto& { return c.metrics.color.normalize; }));
        v.emplace_back("lbp_normalize", bool_field([](auto& c) -> auto& { return c.metrics.normalize_lbp; }));
        v.emplace_back("econ_mode", Field{[](Config& c, const KeyValues& kv, const std::string& k) {
                                              const std::string s = kv.raw(k);
                                              if (s == "edge_gradient")
                                                  c.metrics.econ_mode = EconMode::edge_gradient;
                                              else if (s == "edge_map")
                                                  c.metrics.econ_mode = EconMode::edge_map;
                                              else
                                                  throw ConfigError("key 'econ_mode': expected edge_gradient or "
                                                                    "edge_map, got '" + s + "'");
                                          },
                                          [](const Config& c) {
                                              return std::string(c.metrics.econ_mode == EconMode::edge_gradient
                                                                     ? "edge_gradient"
                                                                     : "edge_map");
                                          }});
        v.emplace_back("train_murals", int_field<int>([](auto& c) -> auto& { return c.train_murals; }));
        v.emplace_back("test_murals", int_field<int>([](auto& c) -> auto& { return c.test_murals; }));
        v.emplace_back("mural_size", int_field<int>([](auto& c) -> auto& { return c.mural_size; }));
        v.emplace_back("patch_size", int_field<int>([](auto& c) -> auto& { return c.patch_size; }));
        v.emplace_back("patch_overlap", double_field([](auto& c) -> auto& { return c.patch_overlap; }));
        v.emplace_back("damage_min", double_field([](auto& c) -> auto& { return c.damage_min; }));
        v.emplace_back("damage_max", double_field([](auto& c) -> auto& { return c.damage_max; }));
        return v;
    }();
    return f;
}

inline Config Config::from_kv(const KeyValues& kv) {
    const auto& fs = fields();
    for (const auto& key : kv.keys()) {
        bool known = false;
        for (const auto& [name, f] : fs) known = known || name == key;
        if (!known) throw ConfigError("unknown config key '" + key + "'");
    }
    Config c;
    for (const auto& [name, f] : fs)
        if (kv.has(name)) f.read(c, kv, name);
    c.validate();
    return c;
}

inline std::string Config::to_text() const {
    std::string s;
    for (const auto& [name, f] : fields()) s += name + " = " + f.write(*this) + "\n";
    return s;
}

inline std::uint64_t Config::hash() const {
    std::string s;
    for (const auto& [name, f] : fields())
        if (name != "threads") s += name + "=" + f.write(*this) + "\n";
    return fnv1a64(s);
}

inline void Config::validate() const {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError(msg);
    };
    need(!name.empty(), "name must be nonempty");
    for (char ch : name) need(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-',
                              "name may contain only letters, digits, '_' and '-'");
    need(threads >= 0, "threads must be >= 0");
    need(timesteps >= 1, "timesteps must be >= 1");
    need(beta_start > 0 && beta_start <= beta_end && beta_end < 1, "need 0 < beta_start <= beta_end < 1");
    need(sample_steps >= 0 && sample_steps <= timesteps, "sample_steps must lie in [0, timesteps]");
    need(lambda_reward >= 0, "lambda_reward must be >= 0");
    need(reward_temperature > 0, "reward_temperature must be > 0");
    need(!scales.empty(), "scales must list at least one size");
    for (std::size_t i = 0; i < scales.size(); ++i) {
        need(scales[i] >= 1, "scales must be positive");
        if (i) need(scales[i] > scales[i - 1], "scales must be strictly increasing");
    }
    need(channels == 1 || channels == 3, "channels must be 1 or 3");
    DenoiserConfig d = denoiser;
    d.image_channels = channels;
    d.validate();
    for (int s : scales)
        need(s % d.size_multiple() == 0,
             "scale " + std::to_string(s) + " is not a multiple of " + std::to_string(d.size_multiple()) +
                 " required by denoiser_depth");
    DiffuserConfig f = diffuser;
    f.image_channels = channels;
    f.validate();
    need(canonical_scale() % 2 == 0, "the largest scale must be even");
    need(train_steps >= 0 && diffuser_steps >= 0 && fdp_steps >= 0, "step counts must be >= 0");
    need(train_batch >= 1 && diffuser_batch >= 1, "batch sizes must be >= 1");
    need(train_lr > 0 && diffuser_lr > 0, "learning rates must be > 0");
    need(fdp_knots >= 1, "fdp_knots must be >= 1");
    need(fdp_fit_images >= 1, "fdp_fit_images must be >= 1");
    need(metrics.ssim.window >= 1 && metrics.ssim.window % 2 == 1, "ssim_window must be odd and >= 1");
    need(metrics.ssim.sigma > 0, "ssim_sigma must be > 0");
    need(metrics.ssim.c1 > 0 && metrics.ssim.c2 > 0, "ssim constants must be > 0");
    need(metrics.color.bins >= 1, "color_bins must be >= 1");
    need(train_murals >= 1 && test_murals >= 1, "mural counts must be >= 1");
    need(mural_size >= 8, "mural_size must be >= 8");
    need(patch_size == canonical_scale(), "patch_size must equal the largest scale");
    need(patch_size <= mural_size, "patch_size must not exceed mural_size");
    need(patch_overlap >= 0 && patch_overlap < 1, "patch_overlap must lie in [0,1)");
    need(damage_min > 0 && damage_max < 1 && damage_min + 0.05 < damage_max,
         "damage range must satisfy 0 < damage_min < damage_max - 0.05 < 1");
    // Schedule construction has its own checks.
    try {
        (void)schedule();
    } catch (const DomainError& e) {
        throw ConfigError(std::string("schedule: ") + e.what());
    }
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::uint64_t file_hash(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot read " + p.string());
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes);
}

// Writes through a sibling temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& p, const std::string& contents) {
    const auto tmp = std::filesystem::path(p.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write " + tmp.string());
        f << contents;
        if (!f) throw IoError("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, p);
}

// Everything needed to repeat a run: the config, seeds, input fingerprints and
// where outputs went. Wall times are informational.
struct RunManifest {
    std::string command;
    std::string config_text;
    std::uint64_t config_hash = 0;
    std::map<std::string, std::uint64_t> seeds;
    std::map<std::string, std::uint64_t> checkpoints;  // path -> content hash
    std::vector<std::pair<std::string, double>> wall_seconds;
    std::map<std::string, std::string> outputs;

    static std::string key_part(std::string k) {
        for (char& ch : k)
            if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
        return k;
    }

    std::string to_text() const {
        std::ostringstream o;
        o << "# run manifest\n";
        o << "command = \"" << command << "\"\n";
        o << "config_hash = \"" << hex64(config_hash) << "\"\n";
        for (const auto& [k, v] : seeds) o << "seed_" << key_part(k) << " = " << v << "\n";
        int i = 0;
        for (const auto& [k, v] : checkpoints) {
            o << "checkpoint_" << i << " = \"" << k << "\"\n";
            o << "checkpoint_" << i++ << "_hash = \"" << hex64(v) << "\"\n";
        }
        for (const auto& [k, v] : wall_seconds)
            o << "wall_seconds_" << key_part(k) << " = " << std::fixed << std::setprecision(3) << v << "\n";
        for (const auto& [k, v] : outputs) o << "output_" << key_part(k) << " = \"" << v << "\"\n";
        o << "\n# config\n" << config_text;
        return o.str();
    }

    void write(const std::filesystem::path& p) const { write_file_atomic(p, to_text()); }
};

}  // namespace mural
