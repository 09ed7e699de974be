// Properties of the desk-preset model trained by the acceptance run (run A).

#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <sys/wait.h>

#include "cpmark/distortions.hpp"
#include "cpmark/imaging.hpp"
#include "cpmark/metrics.hpp"
#include "cpmark/synth.hpp"
#include "cpmark/training.hpp"
#include "helpers.hpp"
#include "json.hpp"

using namespace cpmark;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = CPMARK_WORK_DIR;
const fs::path kCorpus = kWork / "desk_corpus";
const fs::path kCheckpoint = kWork / "run_a" / "final.ckpt";
const fs::path kBadge = kCorpus / "badges" / "badge_0.png";

int run(const std::string& args) {
    const int status = std::system((std::string(CPMARK_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

class DeskModel : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        ASSERT_TRUE(fs::exists(kCheckpoint)) << "run the acceptance test first";
        auto ck = load_checkpoint(kCheckpoint);
        cfg_ = new TrainConfig(train_config_from_json(ck.extra.at("train_config")));
        state_ = new ModelState(std::move(ck.state));
        backend_ = new PerceptualBackend(make_backend(cfg_->perceptual));
        const int side = cfg_->model.image_side;
        hosts_ = new torch::Tensor(load_stack(list_images(kCorpus / "train"), side));
        badge_ = new torch::Tensor(load_image(kBadge, side).data);
    }
    static void TearDownTestSuite() {
        delete cfg_;
        delete state_;
        delete backend_;
        delete hosts_;
        delete badge_;
    }

    static double decoded_psnr(const torch::Tensor& images) {
        auto decoded = decode_images(*state_, images);
        return compare_sets(decoded, badge_->unsqueeze(0).expand_as(decoded), PairCategory::decoded_vs_badge,
                            *backend_).psnr;
    }

    static TrainConfig* cfg_;
    static ModelState* state_;
    static PerceptualBackend* backend_;
    static torch::Tensor* hosts_;
    static torch::Tensor* badge_;
};

TrainConfig* DeskModel::cfg_ = nullptr;
ModelState* DeskModel::state_ = nullptr;
PerceptualBackend* DeskModel::backend_ = nullptr;
torch::Tensor* DeskModel::hosts_ = nullptr;
torch::Tensor* DeskModel::badge_ = nullptr;

}  // namespace

TEST_F(DeskModel, DifferentBadgesGiveDifferentPerturbations) {
    torch::NoGradGuard ng;
    auto host = hosts_->slice(0, 0, 1);
    auto other = synth::badge_image(cfg_->model.image_side, "B", 1).unsqueeze(0);
    auto d1 = encode(host, pre_encode(badge_->unsqueeze(0), *state_), *state_);
    auto d2 = encode(host, pre_encode(other, *state_), *state_);
    EXPECT_GT((d1 - d2).abs().max().item<double>(), 0.0);
}

TEST_F(DeskModel, CliRoundTrip) {
    testing_support::TempDir dir;
    const auto host = list_images(kCorpus / "train").at(0);
    ASSERT_EQ(run("encode --checkpoint " + q(kCheckpoint) + " --in " + q(host) + " --badge " + q(kBadge) +
                  " --out " + q(dir / "enc.png")), 0);
    ASSERT_EQ(run("decode --checkpoint " + q(kCheckpoint) + " --in " + q(dir / "enc.png") + " --out " +
                  q(dir / "dec.png")), 0);
    ASSERT_EQ(run("decode --checkpoint " + q(kCheckpoint) + " --in " + q(host) + " --out " + q(dir / "clean.png")), 0);
    const int side = cfg_->model.image_side;
    auto enc = load_image(dir / "enc.png", side).data;
    EXPECT_GT((enc - load_image(host, side).data).abs().max().item<double>(), 0.0);
    const double from_encoded = psnr(load_image(dir / "dec.png", side).data, *badge_);
    const double from_clean = psnr(load_image(dir / "clean.png", side).data, *badge_);
    EXPECT_GE(from_encoded, 25.0);
    EXPECT_LE(from_clean, from_encoded - 10.0);
}

TEST_F(DeskModel, CliEvalDecodedPsnr) {
    testing_support::TempDir dir;
    ASSERT_EQ(run("eval --checkpoint " + q(kCheckpoint) + " --in " + q(kCorpus / "train") + " --report " +
                  q(dir / "r.csv")), 0);
    auto j = nlohmann::json::parse(std::ifstream(dir / "r.json")).at("reports");
    ASSERT_EQ(j.size(), 2u);
    EXPECT_GE(j[1].at("psnr").get<double>(), 25.0);
}

TEST_F(DeskModel, JpegSweepDegradesGracefully) {
    auto encoded = quantize_8bit(encode_images(*state_, *hosts_, *badge_));
    const double at95 = decoded_psnr(real_jpeg_roundtrip(encoded, 95));
    const double at25 = decoded_psnr(real_jpeg_roundtrip(encoded, 25));
    EXPECT_GE(at95, at25 - 5.0);
}

TEST_F(DeskModel, CleanDecodeControl) {
    auto encoded = quantize_8bit(encode_images(*state_, *hosts_, *badge_));
    auto clean = control_clean_decode(*state_, *hosts_, *badge_, *backend_);
    EXPECT_EQ(clean.n_pairs, hosts_->size(0));
    EXPECT_LE(clean.psnr, decoded_psnr(encoded) - 10.0);
}

TEST_F(DeskModel, ShortTextOverlayKeepsBadge) {
    // The reference overlay is 18 px text on 400 px images; scaled to 128 px that is about 6 px.
    auto encoded = quantize_8bit(encode_images(*state_, *hosts_, *badge_));
    const double plain = decoded_psnr(encoded);
    auto wm = control_text_watermark(*state_, encoded, *badge_, TextOverlay{"MM", 6, 0}, *backend_);
    EXPECT_GE(wm.psnr, plain - 3.0) << "overlay " << wm.psnr << " dB vs plain " << plain << " dB";
}
