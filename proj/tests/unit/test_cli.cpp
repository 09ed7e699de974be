#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "cpmark/imaging.hpp"
#include "cpmark/training.hpp"
#include "helpers.hpp"
#include "json.hpp"

using namespace cpmark;
using testing_support::TempDir;
using testing_support::toy_run;

namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out;  // stdout and stderr together
};

Run cli(const std::string& args) {
    const std::string cmd = std::string(CPMARK_CLI_PATH) + " " + args + " 2>&1";
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    while (size_t n = fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Toy corpus, a config file for it, and a briefly trained checkpoint shared by the tests below.
class CliTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new TempDir("cpmark_cli");
        auto toy = toy_run(dir_->path(), 4, 32);
        auto j = to_json(toy.cfg);
        j["total_steps"] = 4;
        config_ = dir_->path() / "toy.json";
        std::ofstream(config_) << j.dump(2);
        badge_ = toy.cfg.data.badges.at(0);
        corpus_ = fs::path(toy.cfg.data.corpus_root) / "train";
        host_ = toy.corpus.image_paths.at(0);
        auto r = cli("train --config " + q(config_) + " --out " + q(dir_->path() / "run"));
        ASSERT_EQ(r.code, 0) << r.out;
        checkpoint_ = dir_->path() / "run" / "final.ckpt";
    }
    static void TearDownTestSuite() { delete dir_; }

    static TempDir* dir_;
    static fs::path config_, badge_, corpus_, host_, checkpoint_;
};

TempDir* CliTest::dir_ = nullptr;
fs::path CliTest::config_, CliTest::badge_, CliTest::corpus_, CliTest::host_, CliTest::checkpoint_;

}  // namespace

TEST_F(CliTest, TrainPrintsCheckpoint) {
    ASSERT_TRUE(fs::exists(checkpoint_));
    auto r = cli("train --config " + q(config_) + " --set total_steps=0 --out " + q(dir_->path() / "zero"));
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("final.ckpt"), std::string::npos);
    EXPECT_TRUE(fs::exists(dir_->path() / "zero" / "final.ckpt"));
}

TEST_F(CliTest, UnknownOverrideIsConfigError) {
    auto r = cli("train --config " + q(config_) + " --set model.bogus=1 --out " + q(dir_->path() / "x"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("model.bogus"), std::string::npos) << r.out;
}

TEST_F(CliTest, MissingConfigIsUsageError) {
    EXPECT_EQ(cli("train").code, 2);
    EXPECT_EQ(cli("train --config " + q(dir_->path() / "nope.json")).code, 2);
}

TEST_F(CliTest, EncodeIsDeterministicPng) {
    const auto a = dir_->path() / "enc_a.png", b = dir_->path() / "enc_b.png";
    auto r = cli("encode --checkpoint " + q(checkpoint_) + " --in " + q(host_) + " --badge " + q(badge_) +
                 " --out " + q(a));
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("psnr"), std::string::npos);
    ASSERT_EQ(cli("encode --checkpoint " + q(checkpoint_) + " --in " + q(host_) + " --badge " + q(badge_) +
                  " --out " + q(b)).code, 0);
    const auto bytes = slurp(a);
    EXPECT_EQ(bytes, slurp(b));
    EXPECT_EQ(bytes.substr(1, 3), "PNG");
}

TEST_F(CliTest, EncodeRejectsLossyExtension) {
    auto r = cli("encode --checkpoint " + q(checkpoint_) + " --in " + q(host_) + " --badge " + q(badge_) +
                 " --out " + q(dir_->path() / "enc.jpg"));
    EXPECT_EQ(r.code, 2);
    EXPECT_FALSE(fs::exists(dir_->path() / "enc.jpg"));
}

TEST_F(CliTest, DecodeWritesBadgeShapedImage) {
    const auto enc = dir_->path() / "for_decode.png", dec = dir_->path() / "decoded.png";
    ASSERT_EQ(cli("encode --checkpoint " + q(checkpoint_) + " --in " + q(host_) + " --badge " + q(badge_) +
                  " --out " + q(enc)).code, 0);
    auto r = cli("decode --checkpoint " + q(checkpoint_) + " --in " + q(enc) + " --out " + q(dec));
    ASSERT_EQ(r.code, 0) << r.out;
    auto img = load_image(dec, 32);
    auto badge = load_image(badge_, 32);
    EXPECT_EQ(img.data.sizes(), badge.data.sizes());
}

TEST_F(CliTest, DecodeWithBadCheckpointIsError) {
    const auto bogus = dir_->path() / "bogus.ckpt";
    std::ofstream(bogus) << "not a checkpoint";
    auto r = cli("decode --checkpoint " + q(bogus) + " --in " + q(host_) + " --out " + q(dir_->path() / "d.png"));
    EXPECT_EQ(r.code, 2);
    r = cli("decode --checkpoint " + q(dir_->path() / "missing.ckpt") + " --in " + q(host_) + " --out " +
            q(dir_->path() / "d.png"));
    EXPECT_EQ(r.code, 2);
}

TEST_F(CliTest, EvalReportSchemaAndDeterminism) {
    const auto a = dir_->path() / "eval_a.csv", b = dir_->path() / "eval_b.csv";
    auto r = cli("eval --checkpoint " + q(checkpoint_) + " --in " + q(corpus_) + " --report " + q(a));
    ASSERT_EQ(r.code, 0) << r.out;
    ASSERT_EQ(cli("eval --checkpoint " + q(checkpoint_) + " --in " + q(corpus_) + " --report " + q(b)).code, 0);
    EXPECT_EQ(slurp(a), slurp(b));
    auto j = nlohmann::json::parse(std::ifstream(fs::path(a).replace_extension(".json"))).at("reports");
    ASSERT_EQ(j.size(), 2u);
    EXPECT_EQ(j[0].at("category"), "encoded_vs_host");
    EXPECT_EQ(j[1].at("category"), "decoded_vs_badge");
    for (const auto& row : j)
        for (const char* key : {"ssim", "psnr", "lpips", "fid"}) EXPECT_TRUE(row.contains(key)) << key;
    EXPECT_EQ(j[0].at("n_pairs"), 4);
}

TEST_F(CliTest, EvalEmptyCorpusIsError) {
    fs::create_directories(dir_->path() / "empty");
    auto r = cli("eval --checkpoint " + q(checkpoint_) + " --in " + q(dir_->path() / "empty") + " --report " +
                 q(dir_->path() / "e.csv"));
    EXPECT_EQ(r.code, 2);
}

TEST_F(CliTest, SweepRowCount) {
    const auto path = dir_->path() / "sweep.csv";
    auto r = cli("sweep --checkpoint " + q(checkpoint_) + " --in " + q(corpus_) + " --report " + q(path));
    ASSERT_EQ(r.code, 0) << r.out;
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "label,distortion,param,ssim,psnr,lpips,fid,n_pairs");
    int jpeg = 0, blur = 0;
    while (std::getline(in, line)) {
        jpeg += line.find(",jpeg,") != std::string::npos;
        blur += line.find(",gaussian_blur,") != std::string::npos;
    }
    EXPECT_EQ(jpeg, 9);
    EXPECT_EQ(blur, 4);
}
