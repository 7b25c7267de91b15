// Copyright (C) 2026 The mural-restore Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "mural/image_io.hpp"

namespace fs = std::filesystem;

namespace {

const char* const kTinyConfig = R"(name = tiny
timesteps = 20
beta_start = 0.001
beta_end = 0.3
scales = 8, 16
patch_size = 16
mural_size = 16
patch_overlap = 0
denoiser_base_channels = 4
denoiser_depth = 1
denoiser_heads = 1
denoiser_head_dim = 4
denoiser_time_embed_dim = 4
diffuser_channels = 2
diffuser_time_embed_dim = 4
train_steps = 3
train_batch = 1
diffuser_steps = 2
diffuser_batch = 1
train_murals = 3
test_murals = 2
fdp_steps = 3
fdp_fit_images = 1
fdp_knots = 4
)";

struct Result {
    int code = -1;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

class Cli : public ::testing::Test {
protected:
    static fs::path root;

    static void SetUpTestSuite() {
        root = fs::temp_directory_path() / ("mural_cli_" + std::to_string(::getpid()));
        fs::remove_all(root);
        fs::create_directories(root);
        std::ofstream(root / "tiny.txt") << kTinyConfig;
        const Result r = run("pipeline --config " + cfg() + " --out " + (root / "base").string());
        ASSERT_EQ(r.code, 0) << r.err;
    }

    static void TearDownTestSuite() { fs::remove_all(root); }

    static std::string cfg() { return (root / "tiny.txt").string(); }
    static fs::path base() { return root / "base"; }
    static fs::path ckpt() { return base() / "checkpoints"; }
    static fs::path damaged() { return base() / "data" / "test" / "test0000.damaged.png"; }
    static fs::path mask() { return base() / "data" / "test" / "test0000.mask.png"; }

    static Result run(const std::string& args) {
        const fs::path err = root / "stderr.txt";
        const std::string cmd = std::string(MURAL_CLI_PATH) + " " + args + " > /dev/null 2> " + err.string();
        const int status = std::system(cmd.c_str());
        Result r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.err = slurp(err);
        return r;
    }

    static Result restore(const fs::path& out, const std::string& extra = "") {
        return run("restore --config " + cfg() + " --input " + damaged().string() + " --mask " + mask().string() +
                   " --checkpoint-dir " + ckpt().string() + " --output " + out.string() + " " + extra);
    }
};

fs::path Cli::root;

}  // namespace

TEST_F(Cli, RestoreKeepsKnownPixels) {
    const fs::path out = root / "r1.png";
    const Result r = restore(out, "--steps 1 --seed 0");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(out.string() + ".manifest.txt"));
    const auto in = mural::read_image(damaged());
    const auto got = mural::read_image(out);
    const auto m = mural::read_image(mask());
    ASSERT_EQ(got.height(), in.height());
    ASSERT_EQ(got.width(), in.width());
    int known = 0;
    for (int y = 0; y < in.height(); ++y)
        for (int x = 0; x < in.width(); ++x) {
            if (m(y, x, 0) > 0.5) continue;
            ++known;
            for (int c = 0; c < in.channels(); ++c) ASSERT_EQ(got(y, x, c), in(y, x, c)) << y << "," << x;
        }
    EXPECT_GT(known, 0);
}

TEST_F(Cli, RestoreIsByteDeterministic) {
    ASSERT_EQ(restore(root / "d1.png", "--seed 3").code, 0);
    ASSERT_EQ(restore(root / "d2.png", "--seed 3").code, 0);
    EXPECT_EQ(slurp(root / "d1.png"), slurp(root / "d2.png"));
}

TEST_F(Cli, MissingCheckpointNamesScale) {
    const fs::path dir = root / "partial_ckpt";
    fs::create_directories(dir);
    fs::copy(ckpt(), dir, fs::copy_options::overwrite_existing);
    fs::remove(dir / "denoiser_s8.ckpt");
    const Result r = run("restore --config " + cfg() + " --input " + damaged().string() + " --mask " +
                         mask().string() + " --checkpoint-dir " + dir.string() + " --output " +
                         (root / "x.png").string());
    EXPECT_EQ(r.code, 2) << r.err;
    EXPECT_NE(r.err.find("scale 8"), std::string::npos) << r.err;
}

TEST_F(Cli, UnknownConfigKeyExits3) {
    std::ofstream(root / "bad.txt") << kTinyConfig << "warp_factor = 9\n";
    const Result r = run("synth --config " + (root / "bad.txt").string() + " --out " + (root / "s").string());
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("warp_factor"), std::string::npos) << r.err;
}

TEST_F(Cli, LambdaChangesConfigHash) {
    const auto hash_of = [](const fs::path& manifest) {
        std::istringstream in(slurp(manifest));
        std::string line;
        while (std::getline(in, line))
            if (line.rfind("config_hash", 0) == 0) return line;
        return std::string();
    };
    ASSERT_EQ(run("pipeline --config " + cfg() + " --out " + (root / "l0").string() + " --lambda 0 --stop-after synth")
                  .code,
              0);
    ASSERT_EQ(run("pipeline --config " + cfg() + " --out " + (root / "l1").string() + " --stop-after synth").code, 0);
    const std::string a = hash_of(root / "l0" / "manifest.txt");
    const std::string b = hash_of(root / "l1" / "manifest.txt");
    ASSERT_FALSE(a.empty());
    ASSERT_FALSE(b.empty());
    EXPECT_NE(a, b);
}

TEST_F(Cli, ResumeMatchesUninterruptedRun) {
    const fs::path out = root / "resumed";
    ASSERT_EQ(run("pipeline --config " + cfg() + " --out " + out.string() + " --stop-after train").code, 0);
    EXPECT_FALSE(fs::exists(out / "report.csv"));
    const Result r = run("pipeline --config " + cfg() + " --out " + out.string() + " --resume");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(slurp(out / "report.csv"), slurp(base() / "report.csv"));
}

TEST_F(Cli, ResumeRejectsChangedConfig) {
    const fs::path out = root / "changed";
    ASSERT_EQ(run("pipeline --config " + cfg() + " --out " + out.string() + " --stop-after synth").code, 0);
    const Result r = run("pipeline --config " + cfg() + " --out " + out.string() + " --resume --seed 9");
    EXPECT_NE(r.code, 0);
}

TEST_F(Cli, EvaluateCsvHeader) {
    const fs::path csv = root / "eval.csv";
    const Result r = run("evaluate --config " + cfg() + " --repaired " + (base() / "restored").string() +
                         " --reference " + (base() / "data" / "test").string() + " --csv " + csv.string());
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream in(slurp(csv));
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "file,ssim,ccon_chi2,ccon_sim,tcon_chi2,tcon_sim,econ");
}

TEST_F(Cli, OracleCheckSmallRun) {
    const Result r = run("oracle-check --spec gaussian --steps 100 --samples 2000 --seed 0");
    EXPECT_EQ(r.code, 0) << r.err;
}

TEST_F(Cli, LockedRunDirectoryFails) {
    const fs::path out = root / "locked";
    fs::create_directories(out);
    std::ofstream(out / ".lock") << "1\n";
    const Result r = run("pipeline --config " + cfg() + " --out " + out.string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("lock"), std::string::npos) << r.err;
}

TEST_F(Cli, DivergentTrainingExits4) {
    const fs::path out = root / "nan";
    ASSERT_EQ(run("pipeline --config " + cfg() + " --out " + out.string() + " --stop-after crop").code, 0);
    const Result r = run("train --config " + cfg() + " --set train_lr=1e300 --data " + (out / "patches").string() +
                         " --checkpoint-dir " + (out / "ck").string());
    EXPECT_EQ(r.code, 4) << r.err;
}

TEST_F(Cli, NoSubcommandFails) { EXPECT_NE(run("").code, 0); }
