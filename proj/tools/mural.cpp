// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

// mural: synthesize data, train the per-scale denoisers and dynamic diffusers,
// restore damaged murals and score the results.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mural/mural.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace mural;
using nn::Checkpoint;
using nn::load_checkpoint;
using nn::save_checkpoint;

namespace {

enum ExitCode : int { kOk = 0, kFailure = 1, kCheckpoint = 2, kConfig = 3, kNonFinite = 4 };

void log(const std::string& msg) { std::cerr << "[mural] " << msg << std::endl; }

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fixed(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

//
// Options shared by every subcommand
//

struct Common {
    std::string config;  // path, or the built-in names "default" and "smoke"
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::optional<double> lambda;
    int threads = -1;

    void attach(CLI::App* app) {
        app->add_option("--config", config, "config file, or the built-in 'default' / 'smoke'");
        app->add_option("--set", sets, "override one config entry, key=value (repeatable)");
        app->add_option("--seed", seed, "root seed (overrides MURAL_SEED and the config)");
        app->add_option("--lambda", lambda, "contour reward weight (lambda_reward)");
        app->add_option("--threads", threads, "worker threads, 0 for all cores");
    }

    Config load() const {
        Config c;
        if (config.empty() || config == "default")
            c = Config{};
        else if (config == "smoke")
            c = smoke_config();
        else
            c = Config::load(config);
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
            c.set(KeyValues::trim(s.substr(0, eq)), KeyValues::trim(s.substr(eq + 1)));
        }
        if (const char* env = std::getenv("MURAL_SEED"); env && *env) c.set("seed", env);
        if (seed) c.seed = *seed;
        if (lambda) c.set("lambda_reward", std::to_string(*lambda));
        if (threads >= 0) c.threads = threads;
        c.validate();
        return c;
    }
};

unsigned worker_threads(const Config& c) { return c.threads > 0 ? static_cast<unsigned>(c.threads) : default_threads(); }

//
// On-disk data: <id>.clean.png, <id>.damaged.png, <id>.mask.png
//

void write_mask(const ContourMask& m, const fs::path& p) { write_image(m.to_image(), p, 8); }
ContourMask read_mask(const fs::path& p) { return ContourMask::from_image(read_image(p)); }

std::string id_name(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%04zu", prefix, i);
    return buf;
}

struct Triple {
    std::string id;
    Image clean, damaged;
    ContourMask mask;
};

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<std::string> list_ids(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string n = e.path().filename().string();
        if (ends_with(n, ".damaged.png")) ids.push_back(n.substr(0, n.size() - 12));
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw IoError("no *.damaged.png files in " + dir.string());
    return ids;
}

std::vector<Triple> load_triples(const fs::path& dir) {
    std::vector<Triple> out;
    for (const auto& id : list_ids(dir))
        out.push_back({id, read_image(dir / (id + ".clean.png")), read_image(dir / (id + ".damaged.png")),
                       read_mask(dir / (id + ".mask.png"))});
    return out;
}

void write_triple(const fs::path& dir, const std::string& id, const Image& clean, const Image& damaged,
                  const ContourMask& mask) {
    write_image(clean, dir / (id + ".clean.png"), 16);
    write_image(damaged, dir / (id + ".damaged.png"), 16);
    write_mask(mask, dir / (id + ".mask.png"));
}

//
// Conditioning shared by training and restoration
//

struct Conditioning {
    ContourMask contour;  // full resolution
    double threshold = 0.5;
};

Conditioning condition_for(const Image& damaged, const ContourMask& missing, std::uint64_t seed) {
    Conditioning c;
    c.contour = extract_contour_by_region(damaged, missing, seed);
    const ContourMask intact = ~missing;
    ContourOptions opt;
    opt.seed = seed;
    opt.allow_degenerate = true;
    opt.region = &intact;
    const ContourResult r = extract_contour(damaged, opt);
    if (!r.degenerate) c.threshold = r.threshold();
    return c;
}

ConditionSet condition_at(const Conditioning& c, int size, const Config& cfg) {
    ConditionSet s;
    s.contour = c.contour.same_shape(size, size) ? c.contour : c.contour.resized(size, size);
    s.lambda = cfg.lambda_reward;
    s.reward_threshold = c.threshold;
    return s;
}

//
// Checkpoints
//

DenoiserConfig denoiser_config(const Config& c) {
    DenoiserConfig d = c.denoiser;
    d.image_channels = c.channels;
    return d;
}

DiffuserConfig diffuser_config(const Config& c) {
    DiffuserConfig d = c.diffuser;
    d.image_channels = c.channels;
    return d;
}

std::uint64_t model_hash(const std::string& describe, const Config& c) {
    return fnv1a64(describe + "timesteps = " + std::to_string(c.timesteps) + "\nbeta_start = " +
                   fixed(c.beta_start, 12) + "\nbeta_end = " + fixed(c.beta_end, 12) + "\n");
}

fs::path denoiser_path(const fs::path& dir, int s) { return dir / ("denoiser_s" + std::to_string(s) + ".ckpt"); }
fs::path diffuser_path(const fs::path& dir, int s) { return dir / ("diffuser_s" + std::to_string(s) + ".ckpt"); }

struct Models {
    std::vector<std::unique_ptr<Denoiser>> denoisers;
    std::vector<std::unique_ptr<DynamicDiffuser>> diffusers;
    std::map<std::string, std::uint64_t> hashes;

    Collaborators collaborators() const {
        Collaborators co;
        for (const auto& d : denoisers) co.predictors.push_back(d.get());
        for (const auto& d : diffusers) co.diffusers.push_back(d.get());
        return co;
    }
};

std::unique_ptr<Denoiser> load_denoiser(const fs::path& dir, int s, const Config& cfg, Models* record = nullptr) {
    const fs::path p = denoiser_path(dir, s);
    if (!fs::exists(p)) throw CheckpointError("missing denoiser checkpoint for scale " + std::to_string(s) + ": " + p.string());
    const DenoiserConfig dc = denoiser_config(cfg);
    const Denoiser probe(dc, s, s, 0);
    Checkpoint ck = load_checkpoint(p, model_hash(probe.describe(), cfg));
    if (record) record->hashes[p.string()] = file_hash(p);
    return std::make_unique<Denoiser>(dc, s, s, std::move(ck.params));
}

Models load_models(const fs::path& dir, const Config& cfg, bool with_diffusers) {
    Models m;
    for (int s : cfg.scales) m.denoisers.push_back(load_denoiser(dir, s, cfg, &m));
    if (!with_diffusers || !cfg.learned_fusion) return m;
    const int H = cfg.canonical_scale();
    const DiffuserConfig fc = diffuser_config(cfg);
    const DynamicDiffuser probe(fc, H, H, 0);
    for (int s : cfg.scales) {
        const fs::path p = diffuser_path(dir, s);
        if (!fs::exists(p))
            throw CheckpointError("missing diffuser checkpoint for scale " + std::to_string(s) + ": " + p.string());
        Checkpoint ck = load_checkpoint(p, model_hash(probe.describe(), cfg) ^ static_cast<std::uint64_t>(s));
        m.hashes[p.string()] = file_hash(p);
        m.diffusers.push_back(std::make_unique<DynamicDiffuser>(fc, H, H, std::move(ck.params)));
    }
    return m;
}

//
// Stages
//

void run_synth(const Config& cfg, const fs::path& out, std::size_t count, int size, std::uint64_t stage_id,
               const char* prefix) {
    fs::create_directories(out);
    for (std::size_t i = 0; i < count; ++i) {
        SyntheticMuralSpec spec;
        spec.height = spec.width = size;
        spec.damage_min = cfg.damage_min;
        spec.damage_max = cfg.damage_max;
        // Redraw the rare mural the validity filter would reject.
        for (std::uint64_t attempt = 0;; ++attempt) {
            spec.seed = derive_seed(cfg.seed, stage_id, i + (attempt << 32));
            const SynthMural m = synth_mural(spec);
            if (!filter_invalid(m.clean).keep) continue;
            write_triple(out, id_name(prefix, i), m.clean, m.damaged, m.damage);
            break;
        }
    }
    log("synth: wrote " + std::to_string(count) + " triples to " + out.string());
}

void run_crop(const Config& cfg, const fs::path& in, const fs::path& out, int patch, double overlap) {
    fs::create_directories(out);
    std::ostringstream csv;
    csv << "patch,source,y0,x0,size,kept,dark_fraction\n";
    std::size_t kept = 0, total = 0;
    for (const auto& t : load_triples(in)) {
        const CropPlan plan = plan_crops(t.damaged.height(), t.damaged.width(), patch, overlap);
        for (int y0 : plan.row_origins)
            for (int x0 : plan.col_origins) {
                const std::string id = t.id + "_y" + std::to_string(y0) + "_x" + std::to_string(x0);
                const Image dmg = crop(t.damaged, y0, x0, patch, patch);
                const FilterVerdict v = filter_invalid(dmg);
                ++total;
                csv << id << "," << t.id << "," << y0 << "," << x0 << "," << patch << "," << (v.keep ? 1 : 0) << ","
                    << fixed(v.dark_fraction) << "\n";
                if (!v.keep) continue;
                ++kept;
                write_triple(out, id, crop(t.clean, y0, x0, patch, patch), dmg, crop(t.mask, y0, x0, patch, patch));
            }
    }
    write_file_atomic(out / "crops.csv", csv.str());
    (void)cfg;
    log("crop: kept " + std::to_string(kept) + " of " + std::to_string(total) + " patches");
}

std::vector<Conditioning> conditions_for(const Config& cfg, const std::vector<Triple>& data) {
    std::vector<Conditioning> out(data.size());
    parallel_for(data.size(), worker_threads(cfg), [&](std::size_t i) {
        out[i] = condition_for(data[i].damaged, data[i].mask, derive_seed(cfg.seed, stage::contour, i));
    });
    return out;
}

void run_train(const Config& cfg, const fs::path& data_dir, const fs::path& ckpt_dir, std::optional<int> only_scale) {
    fs::create_directories(ckpt_dir);
    const auto data = load_triples(data_dir);
    const auto conds = conditions_for(cfg, data);
    const NoiseSchedule sched = cfg.schedule();
    const unsigned threads = worker_threads(cfg);
    for (int s : cfg.scales) {
        if (only_scale && *only_scale != s) continue;
        Stopwatch sw;
        std::vector<TrainingSample> samples;
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (data[i].clean.height() != cfg.canonical_scale() || data[i].clean.width() != cfg.canonical_scale())
                throw ConfigError("train: patch " + data[i].id + " is " + data[i].clean.shape().str() +
                                  ", expected the largest scale " + std::to_string(cfg.canonical_scale()));
            samples.push_back({to_latent(resample(data[i].clean, s, s)), condition_at(conds[i], s, cfg)});
        }
        Denoiser model(denoiser_config(cfg), s, s, derive_seed(cfg.seed, stage::init_params, s));
        nn::Adam adam({cfg.train_lr});
        Rng rng(derive_seed(cfg.seed, stage::train, s));
        RewardOptions ro;
        ro.temperature = cfg.reward_temperature;
        double running = 0.0;
        for (int step = 0; step < cfg.train_steps; ++step) {
            std::vector<TrainingSample> batch;
            for (int b = 0; b < cfg.train_batch; ++b) batch.push_back(samples[rng.below(samples.size())]);
            const TrainStepResult r = train_step(model, batch, sched, adam, rng, static_cast<int>(threads), ro);
            running += r.loss;
            if ((step + 1) % 50 == 0 || step + 1 == cfg.train_steps) {
                const int n = (step + 1) % 50 == 0 ? 50 : (step + 1) % 50;
                log("train s" + std::to_string(s) + ": step " + std::to_string(step + 1) + " loss " +
                    fixed(running / n, 5));
                running = 0.0;
            }
        }
        Checkpoint ck;
        ck.config_hash = model_hash(model.describe(), cfg);
        ck.metadata = model.describe();
        ck.params = model.params();
        save_checkpoint(denoiser_path(ckpt_dir, s), ck);
        log("train s" + std::to_string(s) + ": done in " + fixed(sw.seconds(), 1) + " s");
    }
}

void run_train_diffusers(const Config& cfg, const fs::path& data_dir, const fs::path& ckpt_dir) {
    if (!cfg.learned_fusion) {
        log("train-diffusers: fusion = uniform, nothing to train");
        return;
    }
    Models m = load_models(ckpt_dir, cfg, false);
    const auto data = load_triples(data_dir);
    const auto conds = conditions_for(cfg, data);
    const int H = cfg.canonical_scale();
    std::vector<FusionSample> samples;
    for (std::size_t i = 0; i < data.size(); ++i) {
        FusionSample fsmp;
        fsmp.x0 = to_latent(data[i].clean);
        for (int s : cfg.scales) fsmp.conds.push_back(condition_at(conds[i], s, cfg));
        fsmp.canonical_cond = condition_at(conds[i], H, cfg);
        samples.push_back(std::move(fsmp));
    }
    std::vector<std::unique_ptr<DynamicDiffuser>> diffusers;
    std::vector<DynamicDiffuser*> raw;
    for (int s : cfg.scales) {
        diffusers.push_back(std::make_unique<DynamicDiffuser>(diffuser_config(cfg), H, H,
                                                              derive_seed(cfg.seed, stage::init_params, 1000 + s)));
        raw.push_back(diffusers.back().get());
    }
    DiffuserTrainOptions opt;
    opt.steps = cfg.diffuser_steps;
    opt.batch = cfg.diffuser_batch;
    opt.adam.lr = cfg.diffuser_lr;
    opt.seed = derive_seed(cfg.seed, stage::train_diffusers);
    opt.threads = worker_threads(cfg);
    opt.on_step = [&](int step, double loss) {
        if ((step + 1) % 20 == 0 || step + 1 == opt.steps)
            log("train-diffusers: step " + std::to_string(step + 1) + " loss " + fixed(loss, 5));
    };
    const Collaborators co = m.collaborators();
    train_diffusers(raw, co.predictors, samples, cfg.schedule(), opt);
    for (std::size_t n = 0; n < cfg.scales.size(); ++n) {
        Checkpoint ck;
        ck.config_hash = model_hash(diffusers[n]->describe(), cfg) ^ static_cast<std::uint64_t>(cfg.scales[n]);
        ck.metadata = diffusers[n]->describe() + "scale = " + std::to_string(cfg.scales[n]) + "\n";
        ck.params = diffusers[n]->params();
        save_checkpoint(diffuser_path(ckpt_dir, cfg.scales[n]), ck);
    }
}

struct RestoreSeeds {
    std::uint64_t contour = 0, sample = 0;
};

Image restore_one(const Config& cfg, const Models& models, const Image& damaged, const ContourMask& missing,
                  const NoiseSchedule& sched, const RestoreSeeds& seeds, const RadialFilter* fdp,
                  const std::function<void(int, const InfluenceStack&)>& on_influence = {}) {
    const int H = cfg.canonical_scale();
    if (damaged.height() != H || damaged.width() != H)
        throw ConfigError("restore: input is " + damaged.shape().str() + ", the models restore " + std::to_string(H) +
                          "x" + std::to_string(H) + " patches");
    if (damaged.channels() != cfg.channels)
        throw ConfigError("restore: input has " + std::to_string(damaged.channels()) + " channels, config expects " +
                          std::to_string(cfg.channels));
    if (!missing.same_shape(H, H)) throw ShapeError("restore: mask size differs from the input");
    const Conditioning cond = condition_for(damaged, missing, seeds.contour);
    SampleRequest req;
    for (int s : cfg.scales) req.conditions.push_back(condition_at(cond, s, cfg));
    req.canonical_condition = condition_at(cond, H, cfg);
    req.known = to_latent(damaged);
    req.missing = missing;
    SampleOptions opt;
    opt.seed = seeds.sample;
    opt.harmonize = cfg.harmonize;
    opt.threads = worker_threads(cfg);
    opt.on_influence = on_influence;
    Image out = collaborative_sample(models.collaborators(), req, sched, opt);
    if (!fdp) return out;
    // The filter only touches generated pixels; known pixels stay as given.
    const Image filtered = apply_filter(out, *fdp);
    std::vector<double> v(out.values());
    const int C = out.channels();
    for (std::size_t p = 0; p < missing.size(); ++p)
        if (missing.data()[p])
            for (int c = 0; c < C; ++c) v[p * C + c] = filtered.data()[p * C + c];
    return Image(out.shape(), std::move(v));
}

void run_fit_fdp(const Config& cfg, const fs::path& data_dir, const fs::path& ckpt_dir) {
    if (!cfg.fdp) {
        log("fdp: disabled in config");
        return;
    }
    const Models m = load_models(ckpt_dir, cfg, true);
    const auto data = load_triples(data_dir);
    const NoiseSchedule sched = cfg.sampling_schedule();
    std::vector<std::pair<Image, Image>> pairs;
    const std::size_t n = std::min<std::size_t>(cfg.fdp_fit_images, data.size());
    for (std::size_t i = 0; i < n; ++i) {
        const RestoreSeeds seeds{derive_seed(cfg.seed, stage::contour, i),
                                 derive_seed(cfg.seed, stage::sample, (1ull << 40) + i)};
        pairs.emplace_back(restore_one(cfg, m, data[i].damaged, data[i].mask, sched, seeds, nullptr), data[i].clean);
    }
    const FilterFit fit = fit_filter(pairs, cfg.fdp_knots, cfg.fdp_steps);
    fit.filter.save(ckpt_dir / "fdp.txt");
    log("fdp: fitted " + std::to_string(cfg.fdp_knots) + " gains, mse " + fixed(fit.loss_trace.front(), 6) + " -> " +
        fixed(fit.loss_trace.back(), 6));
}

std::optional<RadialFilter> resolve_fdp(const Config& cfg, const std::string& flag, const fs::path& ckpt_dir) {
    if (flag == "off") return std::nullopt;
    if (!flag.empty()) return RadialFilter::load(flag);
    if (!cfg.fdp) return std::nullopt;
    const fs::path p = ckpt_dir / "fdp.txt";
    if (fs::exists(p)) return RadialFilter::load(p);
    log("restore: no fdp.txt in " + ckpt_dir.string() + ", skipping the frequency filter");
    return std::nullopt;
}

//
// Evaluation
//

struct Scored {
    std::string file;
    MetricReport report;
};

const char* kPerFileHeader = "file,ssim,ccon_chi2,ccon_sim,tcon_chi2,tcon_sim,econ\n";

std::string per_file_row(const std::string& file, const MetricReport& r) {
    return file + "," + fixed(r.ssim) + "," + fixed(r.ccon.chi2) + "," + fixed(r.ccon.similarity) + "," +
           fixed(r.tcon.chi2) + "," + fixed(r.tcon.similarity) + "," + fixed(r.econ) + "\n";
}

MetricReport mean_report(const std::vector<Scored>& rows) {
    MetricReport m;
    m.ccon = m.tcon = Consistency{0.0, 0.0};
    for (const auto& r : rows) {
        m.ssim += r.report.ssim;
        m.ccon.chi2 += r.report.ccon.chi2;
        m.ccon.similarity += r.report.ccon.similarity;
        m.tcon.chi2 += r.report.tcon.chi2;
        m.tcon.similarity += r.report.tcon.similarity;
        m.econ += r.report.econ;
    }
    const double n = static_cast<double>(std::max<std::size_t>(rows.size(), 1));
    m.ssim /= n;
    m.ccon.chi2 /= n;
    m.ccon.similarity /= n;
    m.tcon.chi2 /= n;
    m.tcon.similarity /= n;
    m.econ /= n;
    return m;
}

json report_json(const MetricReport& r) {
    return json{{"SSIM", r.ssim},
                {"CCON", r.ccon.similarity},
                {"CCON_chi2", r.ccon.chi2},
                {"TCON", r.tcon.similarity},
                {"TCON_chi2", r.tcon.chi2},
                {"ECON", r.econ}};
}

void write_per_file(const std::vector<Scored>& rows, const std::string& csv_path, const std::string& json_path,
                    bool masked) {
    if (!csv_path.empty()) {
        std::string s = kPerFileHeader;
        for (const auto& r : rows) s += per_file_row(r.file, r.report);
        s += per_file_row("mean", mean_report(rows));
        write_file_atomic(csv_path, s);
    }
    if (!json_path.empty()) {
        json j;
        j["metrics"] = {"SSIM", "CCON", "TCON", "ECON"};
        j["region"] = masked ? "masked" : "full";
        j["files"] = json::array();
        for (const auto& r : rows) {
            json e = report_json(r.report);
            e["file"] = r.file;
            j["files"].push_back(e);
        }
        j["mean"] = report_json(mean_report(rows));
        write_file_atomic(json_path, j.dump(2) + "\n");
    }
}

fs::path sidecar_mask(const fs::path& input) {
    const std::string n = input.filename().string();
    fs::path p;
    if (ends_with(n, ".damaged.png"))
        p = input.parent_path() / (n.substr(0, n.size() - 12) + ".mask.png");
    else
        p = input.parent_path() / (input.stem().string() + ".mask.png");
    if (!fs::exists(p)) throw IoError("--mask auto: no sidecar mask " + p.string());
    return p;
}

//
// Pipeline bookkeeping
//

class DirectoryLock {
public:
    explicit DirectoryLock(fs::path p) : path_(std::move(p)) {
        FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f) throw IoError("output directory is in use (lock file " + path_.string() + " exists)");
        std::fclose(f);
    }
    ~DirectoryLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    fs::path path_;
};

const std::vector<std::string> kStages = {"synth", "crop", "train", "train-diffusers", "fdp", "restore", "evaluate"};

//
// Subcommands
//

int cmd_synth(const Common& common, const std::string& out, std::size_t count, int size, bool test) {
    const Config cfg = common.load();
    run_synth(cfg, out, count, size > 0 ? size : cfg.mural_size, test ? stage::synth_test : stage::synth_train,
              test ? "test" : "train");
    return kOk;
}

int cmd_extract(const Common& common, const std::string& input, const std::string& mask, const std::string& output,
                bool invert) {
    const Config cfg = common.load();
    const Image img = read_image(input);
    const std::uint64_t seed = derive_seed(cfg.seed, stage::contour);
    ContourMask out;
    if (!mask.empty()) {
        const fs::path mp = mask == "auto" ? sidecar_mask(input) : fs::path(mask);
        out = extract_contour_by_region(img, read_mask(mp), seed);
    } else {
        ContourOptions opt;
        opt.seed = seed;
        opt.invert = invert;
        out = extract_contour(img, opt).mask;
    }
    write_mask(out, output);
    log("extract-contour: " + std::to_string(out.count()) + " contour pixels");
    return kOk;
}

int cmd_restore(const Common& common, const std::string& input, const std::string& mask, const std::string& ckpt_dir,
                const std::string& output, int steps, const std::string& fdp_flag, const std::string& dump_dir,
                const std::string& reference, const std::string& report_path) {
    Stopwatch total;
    const Config cfg = common.load();
    RunManifest man;
    man.command = "restore";
    man.config_text = cfg.to_text();
    man.config_hash = cfg.hash();

    Stopwatch sw;
    const Models models = load_models(ckpt_dir, cfg, true);
    man.checkpoints = models.hashes;
    const auto fdp = resolve_fdp(cfg, fdp_flag, ckpt_dir);
    if (fdp && fdp_flag.empty()) man.checkpoints[(fs::path(ckpt_dir) / "fdp.txt").string()] = file_hash(fs::path(ckpt_dir) / "fdp.txt");
    man.wall_seconds.push_back({"load", sw.seconds()});

    const Image damaged = read_image(input);
    const fs::path mask_path = mask == "auto" ? sidecar_mask(input) : fs::path(mask);
    const ContourMask missing = read_mask(mask_path);
    const NoiseSchedule sched = cfg.sampling_schedule(steps);
    const RestoreSeeds seeds{derive_seed(cfg.seed, stage::contour), derive_seed(cfg.seed, stage::sample)};
    man.seeds = {{"root", cfg.seed}, {"contour", seeds.contour}, {"sample", seeds.sample}};

    std::function<void(int, const InfluenceStack&)> dump;
    if (!dump_dir.empty()) {
        fs::create_directories(dump_dir);
        dump = [&](int t, const InfluenceStack& w) {
            for (int n = 0; n < w.count; ++n) {
                char name[64];
                std::snprintf(name, sizeof name, "influence_t%04d_s%d.png", t, cfg.scales[n]);
                write_image(w.map(n), fs::path(dump_dir) / name, 16);
            }
        };
        man.outputs["influence"] = dump_dir;
    }
    sw = Stopwatch();
    const Image restored = restore_one(cfg, models, damaged, missing, sched, seeds, fdp ? &*fdp : nullptr, dump);
    man.wall_seconds.push_back({"sample", sw.seconds()});
    write_image(restored, output, 16);
    man.outputs["image"] = output;

    if (!reference.empty()) {
        const Image ref = read_image(reference);
        const MetricReport r = evaluate(restored, ref, cfg.metrics, &missing);
        const std::string rp = report_path.empty() ? output + ".report.json" : report_path;
        write_per_file({{fs::path(input).filename().string(), r}}, "", rp, true);
        man.outputs["report"] = rp;
        log("restore: SSIM " + fixed(r.ssim, 4) + " CCON " + fixed(r.ccon.similarity, 4) + " TCON " +
            fixed(r.tcon.similarity, 4) + " ECON " + fixed(r.econ, 4));
    }
    man.wall_seconds.push_back({"total", total.seconds()});
    man.write(output + ".manifest.txt");
    log("restore: wrote " + output + " in " + fixed(total.seconds(), 2) + " s");
    return kOk;
}

// Files or directories. In directory mode each repaired image is matched to
// the reference and mask with the same id.
int cmd_evaluate(const Common& common, const std::string& repaired, const std::string& reference,
                 const std::string& mask, const std::string& csv, const std::string& json_path) {
    const Config cfg = common.load();
    if (csv.empty() && json_path.empty()) throw ConfigError("evaluate: give --csv and/or --json");
    auto find = [](const fs::path& dir, const std::string& stem, const std::vector<std::string>& suffixes) {
        for (const auto& s : suffixes)
            if (fs::exists(dir / (stem + s))) return dir / (stem + s);
        throw IoError("no match for '" + stem + "' in " + dir.string());
    };
    std::vector<Scored> rows;
    auto score = [&](const fs::path& rep, const fs::path& ref, const std::optional<fs::path>& mp) {
        const Image a = read_image(rep), b = read_image(ref);
        std::optional<ContourMask> m;
        if (mp) m = read_mask(*mp);
        rows.push_back({rep.filename().string(), evaluate(a, b, cfg.metrics, m ? &*m : nullptr)});
    };
    if (fs::is_directory(repaired)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(repaired))
            if (is_image_path(e.path())) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw IoError("no images in " + repaired);
        for (const auto& f : files) {
            const std::string stem = f.stem().string();
            const fs::path ref = find(reference, stem, {f.filename().string().substr(stem.size()), ".clean.png"});
            std::optional<fs::path> mp;
            if (!mask.empty()) mp = find(mask, stem, {".mask.png", f.filename().string().substr(stem.size())});
            score(f, ref, mp);
        }
    } else {
        std::optional<fs::path> mp;
        if (!mask.empty()) mp = fs::path(mask);
        score(repaired, reference, mp);
    }
    write_per_file(rows, csv, json_path, !mask.empty());
    const MetricReport m = mean_report(rows);
    log("evaluate: " + std::to_string(rows.size()) + " image(s), mean SSIM " + fixed(m.ssim, 4) + " ECON " +
        fixed(m.econ, 4));
    return kOk;
}

int cmd_oracle_check(const Common& common, const std::string& spec_name, int steps, int samples,
                     const std::string& report) {
    const Config cfg = common.load();
    if (steps < 1 || samples < 2) throw ConfigError("oracle-check: need --steps >= 1 and --samples >= 2");
    const NoiseSchedule sched = steps > 20 ? make_scaled_schedule(steps) : make_schedule(steps, 1e-3, 0.3);
    Rng rng(derive_seed(cfg.seed, stage::sample));
    json j;
    j["spec"] = spec_name;
    j["steps"] = steps;
    j["samples"] = samples;
    bool pass = true;
    if (spec_name == "gaussian") {
        Rng mrng(derive_seed(cfg.seed, stage::synth_test));
        std::vector<double> mu(16);
        for (double& v : mu) v = mrng.uniform(-0.6, 0.6);
        const GaussianSpec spec{LatentImage(4, 4, 1, mu), 0.3};
        std::vector<double> sum(16, 0.0), sq(16, 0.0);
        for (int i = 0; i < samples; ++i) {
            const auto x = reverse_chain(spec.mean.shape(), sched, rng, [&](const LatentImage& xt, int t) {
                return oracle_eps_gaussian(xt, t, sched, spec);
            });
            for (int p = 0; p < 16; ++p) {
                sum[p] += x.data()[p];
                sq[p] += x.data()[p] * x.data()[p];
            }
        }
        const double n = samples;
        double max_mean_z = 0.0, max_var_z = 0.0;
        for (int p = 0; p < 16; ++p) {
            const double m = sum[p] / n, var = (sq[p] - n * m * m) / (n - 1);
            max_mean_z = std::max(max_mean_z, std::abs(m - mu[p]) / std::sqrt(spec.variance / n));
            max_var_z = std::max(max_var_z, std::abs(var - spec.variance) / (spec.variance * std::sqrt(2.0 / (n - 1))));
        }
        j["max_mean_z"] = max_mean_z;
        j["max_variance_z"] = max_var_z;
        pass = max_mean_z < 3.0 && max_var_z < 3.0;
    } else if (spec_name == "mixture") {
        const MixtureSpec spec{{{0.5, {LatentImage(1, 1, 1, {-1.0}), 0.1}}, {0.5, {LatentImage(1, 1, 1, {1.0}), 0.1}}}};
        const OraclePredictor oracle(spec, sched);
        const ConditionSet none;
        std::vector<double> xs;
        for (int i = 0; i < samples; ++i)
            xs.push_back(reverse_chain(Shape{1, 1, 1}, sched, rng, [&](const LatentImage& xt, int t) {
                             return oracle.predict(xt, t, none);
                         }).data()[0]);
        const double ks = ks_statistic(xs, [&](double x) { return mixture_cdf(spec, 0, x); });
        j["ks"] = ks;
        pass = ks < 0.03;
    } else {
        throw ConfigError("oracle-check: --spec must be gaussian or mixture");
    }
    j["pass"] = pass;
    if (!report.empty()) write_file_atomic(report, j.dump(2) + "\n");
    log("oracle-check: " + std::string(pass ? "pass" : "FAIL") + " " + j.dump());
    return pass ? kOk : kFailure;
}

int cmd_pipeline(const Common& common, const std::string& out_dir, bool resume, const std::string& stop_after) {
    Stopwatch total;
    const Config cfg = common.load();
    if (!stop_after.empty() && std::find(kStages.begin(), kStages.end(), stop_after) == kStages.end())
        throw ConfigError("--stop-after: unknown stage '" + stop_after + "'");
    const fs::path root(out_dir);
    fs::create_directories(root / "stages");
    DirectoryLock lock(root / ".lock");

    const fs::path cfg_file = root / "config.txt";
    if (resume && fs::exists(cfg_file)) {
        const Config saved = Config::load(cfg_file);
        if (saved.hash() != cfg.hash())
            throw ConfigError("--resume: config differs from the one recorded in " + cfg_file.string());
    } else {
        for (const auto& s : kStages) fs::remove(root / "stages" / (s + ".done"));
    }
    write_file_atomic(cfg_file, cfg.to_text());

    const fs::path train_raw = root / "data" / "train", test_dir = root / "data" / "test";
    const fs::path patches = root / "patches", ckpt = root / "checkpoints";
    const fs::path restored = root / "restored", meanfill = root / "meanfill", eval = root / "eval";

    RunManifest man;
    man.command = "pipeline";
    man.config_text = cfg.to_text();
    man.config_hash = cfg.hash();
    man.seeds = {{"root", cfg.seed}};

    auto stage_body = [&](const std::string& name) {
        if (name == "synth") {
            run_synth(cfg, train_raw, cfg.train_murals, cfg.mural_size, stage::synth_train, "train");
            run_synth(cfg, test_dir, cfg.test_murals, cfg.canonical_scale(), stage::synth_test, "test");
        } else if (name == "crop") {
            run_crop(cfg, train_raw, patches, cfg.patch_size, cfg.patch_overlap);
        } else if (name == "train") {
            run_train(cfg, patches, ckpt, std::nullopt);
        } else if (name == "train-diffusers") {
            run_train_diffusers(cfg, patches, ckpt);
        } else if (name == "fdp") {
            run_fit_fdp(cfg, patches, ckpt);
        } else if (name == "restore") {
            const Models m = load_models(ckpt, cfg, true);
            const auto fdp = resolve_fdp(cfg, "", ckpt);
            const NoiseSchedule sched = cfg.sampling_schedule();
            fs::create_directories(restored);
            fs::create_directories(meanfill);
            const auto test = load_triples(test_dir);
            for (std::size_t i = 0; i < test.size(); ++i) {
                Stopwatch one;
                const RestoreSeeds seeds{derive_seed(cfg.seed, stage::contour, (1ull << 41) + i),
                                         derive_seed(cfg.seed, stage::sample, i)};
                const Image r = restore_one(cfg, m, test[i].damaged, test[i].mask, sched, seeds, fdp ? &*fdp : nullptr);
                write_image(r, restored / (test[i].id + ".png"), 16);
                write_image(mean_fill(test[i].damaged, test[i].mask), meanfill / (test[i].id + ".png"), 16);
                log("restore: " + test[i].id + " in " + fixed(one.seconds(), 2) + " s");
            }
        } else if (name == "evaluate") {
            fs::create_directories(eval);
            const auto test = load_triples(test_dir);
            std::vector<Scored> ours, base;
            for (const auto& t : test) {
                ours.push_back({t.id, evaluate(read_image(restored / (t.id + ".png")), t.clean, cfg.metrics, &t.mask)});
                base.push_back({t.id, evaluate(read_image(meanfill / (t.id + ".png")), t.clean, cfg.metrics, &t.mask)});
            }
            write_per_file(ours, (eval / "ours.csv").string(), (eval / "ours.json").string(), true);
            write_per_file(base, (eval / "mean_fill.csv").string(), (eval / "mean_fill.json").string(), true);
            const MetricReport mo = mean_report(ours), mb = mean_report(base);
            std::string csv = "config,method,SSIM,CCON,TCON,ECON\n";
            auto row = [&](const std::string& method, const MetricReport& r) {
                csv += cfg.name + "," + method + "," + fixed(r.ssim) + "," + fixed(r.ccon.similarity) + "," +
                       fixed(r.tcon.similarity) + "," + fixed(r.econ) + "\n";
            };
            row("ours", mo);
            row("mean_fill", mb);
            write_file_atomic(root / "report.csv", csv);
            json j;
            j["config"] = cfg.name;
            j["config_hash"] = hex64(cfg.hash());
            j["region"] = "damaged";
            j["images"] = test.size();
            j["metrics"] = {"SSIM", "CCON", "TCON", "ECON"};
            j["methods"] = {{"ours", report_json(mo)}, {"mean_fill", report_json(mb)}};
            write_file_atomic(root / "report.json", j.dump(2) + "\n");
            log("report: ours SSIM " + fixed(mo.ssim, 4) + " ECON " + fixed(mo.econ, 4) + " | mean-fill SSIM " +
                fixed(mb.ssim, 4) + " ECON " + fixed(mb.econ, 4));
        }
    };

    for (const auto& name : kStages) {
        const fs::path done = root / "stages" / (name + ".done");
        if (fs::exists(done)) {
            log("stage " + name + ": already complete, skipping");
        } else {
            Stopwatch sw;
            log("stage " + name + ": start");
            try {
                stage_body(name);
            } catch (const std::exception&) {
                log("stage " + name + " failed; completed artifacts are kept in " + root.string());
                throw;
            }
            write_file_atomic(done, "");
            man.wall_seconds.push_back({name, sw.seconds()});
            log("stage " + name + ": done in " + fixed(sw.seconds(), 1) + " s");
        }
        if (name == stop_after) {
            log("stopping after stage " + name);
            break;
        }
    }
    for (int s : cfg.scales)
        for (const fs::path& p : {denoiser_path(ckpt, s), diffuser_path(ckpt, s)})
            if (fs::exists(p)) man.checkpoints[p.string()] = file_hash(p);
    for (const auto& [key, p] : std::vector<std::pair<std::string, fs::path>>{
             {"report_csv", root / "report.csv"}, {"report_json", root / "report.json"}, {"restored", restored}})
        if (fs::exists(p)) man.outputs[key] = p.string();
    man.wall_seconds.push_back({"total", total.seconds()});
    man.write(root / "manifest.txt");
    log("pipeline: finished in " + fixed(total.seconds(), 1) + " s");
    return kOk;
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const CheckpointError*>(&e)) return kCheckpoint;
    if (dynamic_cast<const ConfigError*>(&e)) return kConfig;
    if (dynamic_cast<const NonFiniteError*>(&e)) return kNonFinite;
    return kFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mural: multi-scale collaborative diffusion for mural restoration"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "mural 1.0.0");

    Common common;
    std::function<int()> action;

    {
        auto* c = app.add_subcommand("synth", "write synthetic (clean, damaged, mask) triples");
        common.attach(c);
        auto out = std::make_shared<std::string>();
        auto count = std::make_shared<std::size_t>(8);
        auto size = std::make_shared<int>(0);
        auto test = std::make_shared<bool>(false);
        c->add_option("--out", *out, "output directory")->required();
        c->add_option("--count", *count, "number of murals");
        c->add_option("--size", *size, "mural side length (default: mural_size)");
        c->add_flag("--test", *test, "draw from the held-out seed stream");
        c->callback([&, out, count, size, test] { action = [&, out, count, size, test] { return cmd_synth(common, *out, *count, *size, *test); }; });
    }
    {
        auto* c = app.add_subcommand("extract-contour", "two-cluster contour mask of an image");
        common.attach(c);
        auto in = std::make_shared<std::string>(), mask = std::make_shared<std::string>(),
             out = std::make_shared<std::string>();
        auto invert = std::make_shared<bool>(false);
        c->add_option("--input", *in, "image")->required()->check(CLI::ExistingFile);
        c->add_option("--mask", *mask, "damage mask (path or 'auto'); clusters each region separately");
        c->add_option("--output", *out, "mask PNG")->required();
        c->add_flag("--invert", *invert, "take the lighter cluster as foreground");
        c->callback([&, in, mask, out, invert] { action = [&, in, mask, out, invert] { return cmd_extract(common, *in, *mask, *out, *invert); }; });
    }
    {
        auto* c = app.add_subcommand("crop", "cut triples into overlapping patches");
        common.attach(c);
        auto in = std::make_shared<std::string>(), out = std::make_shared<std::string>();
        auto patch = std::make_shared<int>(0);
        auto overlap = std::make_shared<double>(-1.0);
        c->add_option("--input", *in, "directory of triples")->required();
        c->add_option("--out", *out, "patch directory")->required();
        c->add_option("--patch", *patch, "patch size (default: patch_size)");
        c->add_option("--overlap", *overlap, "overlap fraction (default: patch_overlap)");
        c->callback([&, in, out, patch, overlap] {
            action = [&, in, out, patch, overlap] {
                const Config cfg = common.load();
                run_crop(cfg, *in, *out, *patch > 0 ? *patch : cfg.patch_size, *overlap >= 0 ? *overlap : cfg.patch_overlap);
                return static_cast<int>(kOk);
            };
        });
    }
    {
        auto* c = app.add_subcommand("train", "train the per-scale denoisers");
        common.attach(c);
        auto data = std::make_shared<std::string>(), out = std::make_shared<std::string>();
        auto scale = std::make_shared<int>(0);
        c->add_option("--data", *data, "patch directory")->required();
        c->add_option("--checkpoint-dir", *out, "where checkpoints go")->required();
        c->add_option("--scale", *scale, "train only this scale");
        c->callback([&, data, out, scale] {
            action = [&, data, out, scale] {
                run_train(common.load(), *data, *out, *scale > 0 ? std::optional<int>(*scale) : std::nullopt);
                return static_cast<int>(kOk);
            };
        });
    }
    {
        auto* c = app.add_subcommand("train-diffusers", "train the dynamic diffusers on frozen denoisers");
        common.attach(c);
        auto data = std::make_shared<std::string>(), ck = std::make_shared<std::string>();
        c->add_option("--data", *data, "patch directory")->required();
        c->add_option("--checkpoint-dir", *ck, "checkpoint directory")->required();
        c->callback([&, data, ck] {
            action = [&, data, ck] {
                run_train_diffusers(common.load(), *data, *ck);
                return static_cast<int>(kOk);
            };
        });
    }
    {
        auto* c = app.add_subcommand("fit-fdp", "fit the frequency-domain filter on restored training patches");
        common.attach(c);
        auto data = std::make_shared<std::string>(), ck = std::make_shared<std::string>();
        c->add_option("--data", *data, "patch directory")->required();
        c->add_option("--checkpoint-dir", *ck, "checkpoint directory")->required();
        c->callback([&, data, ck] {
            action = [&, data, ck] {
                run_fit_fdp(common.load(), *data, *ck);
                return static_cast<int>(kOk);
            };
        });
    }
    {
        auto* c = app.add_subcommand("restore", "inpaint the masked region of a damaged image");
        common.attach(c);
        struct Args {
            std::string input, mask = "auto", ckpt, output, fdp, dump, reference, report;
            int steps = 0;
        };
        auto a = std::make_shared<Args>();
        c->add_option("--input", a->input, "damaged image")->required()->check(CLI::ExistingFile);
        c->add_option("--mask", a->mask, "damage mask path, or 'auto' for the <name>.mask.png sidecar");
        c->add_option("--checkpoint-dir", a->ckpt, "checkpoint directory")->required();
        c->add_option("--output", a->output, "restored PNG")->required();
        c->add_option("--steps", a->steps, "sampling steps (respaced; default: sample_steps or timesteps)");
        c->add_option("--fdp", a->fdp, "filter file, or 'off'");
        c->add_option("--dump-influence", a->dump, "write per-step influence maps here");
        c->add_option("--reference", a->reference, "clean image; writes a metric report");
        c->add_option("--report", a->report, "report path (default: <output>.report.json)");
        c->callback([&, a] {
            action = [&, a] {
                return cmd_restore(common, a->input, a->mask, a->ckpt, a->output, a->steps, a->fdp, a->dump,
                                   a->reference, a->report);
            };
        });
    }
    {
        auto* c = app.add_subcommand("evaluate", "score repaired images against references");
        common.attach(c);
        auto rep = std::make_shared<std::string>(), ref = std::make_shared<std::string>(),
             mask = std::make_shared<std::string>(), csv = std::make_shared<std::string>(),
             js = std::make_shared<std::string>();
        c->add_option("--repaired", *rep, "image or directory")->required()->check(CLI::ExistingPath);
        c->add_option("--reference", *ref, "image or directory")->required()->check(CLI::ExistingPath);
        c->add_option("--mask", *mask, "restrict to the masked region (image or directory)");
        c->add_option("--csv", *csv, "CSV report");
        c->add_option("--json", *js, "JSON report");
        c->callback([&, rep, ref, mask, csv, js] {
            action = [&, rep, ref, mask, csv, js] { return cmd_evaluate(common, *rep, *ref, *mask, *csv, *js); };
        });
    }
    {
        auto* c = app.add_subcommand("oracle-check", "sample with the analytic predictor and compare to the target");
        common.attach(c);
        auto spec = std::make_shared<std::string>("gaussian");
        auto steps = std::make_shared<int>(100);
        auto samples = std::make_shared<int>(2000);
        auto report = std::make_shared<std::string>();
        c->add_option("--spec", *spec, "gaussian or mixture");
        c->add_option("--steps", *steps, "chain length");
        c->add_option("--samples", *samples, "number of chains");
        c->add_option("--report", *report, "JSON report");
        c->callback([&, spec, steps, samples, report] {
            action = [&, spec, steps, samples, report] { return cmd_oracle_check(common, *spec, *steps, *samples, *report); };
        });
    }
    {
        auto* c = app.add_subcommand("pipeline", "synthesize, train, restore and report end to end");
        common.attach(c);
        auto out = std::make_shared<std::string>();
        auto resume = std::make_shared<bool>(false);
        auto stop = std::make_shared<std::string>();
        c->add_option("--out", *out, "run directory")->required();
        c->add_flag("--resume", *resume, "skip stages already marked done");
        c->add_option("--stop-after", *stop, "stop after this stage");
        c->callback([&, out, resume, stop] {
            action = [&, out, resume, stop] { return cmd_pipeline(common, *out, *resume, *stop); };
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kFailure;
    }
    try {
        return action ? action() : kFailure;
    } catch (const std::exception& e) {
        log(std::string("error: ") + e.what());
        return exit_code_for(e);
    }
}
