#include "helpers.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <atomic>
#include <unistd.h>

#include "cpmark/synth.hpp"

namespace testing_support {
namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

torch::Tensor random_image(int64_t h, int64_t w, uint64_t seed, torch::Dtype dtype) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    return torch::rand({3, h, w}, gen, torch::TensorOptions().dtype(dtype));
}

torch::Tensor checkerboard(int64_t side, int64_t cell) {
    auto idx = torch::div(torch::arange(side), cell, "floor");
    auto board = ((idx.view({-1, 1}) + idx.view({1, -1})) % 2).to(torch::kFloat);
    return board.unsqueeze(0).expand({3, side, side}).clone();
}

cpmark::ModelConfig tiny_model(int side) {
    cpmark::ModelConfig m;
    m.image_side = side;
    m.base_channels = 4;
    m.depth = 2;
    m.stn_hidden = 16;
    m.channel_doublings = 1;
    m.norm_groups = 2;
    return m;
}

ToyRun toy_run(const fs::path& root, int images, int side, int badges) {
    cpmark::synth::CorpusSpec spec;
    spec.train = images;
    spec.test = 2;
    spec.side = side;
    spec.badges = badges;
    spec.seed = 11;
    cpmark::synth::write_corpus(root, spec);

    ToyRun run;
    auto& c = run.cfg;
    c.model = tiny_model(side);
    c.lr = 1e-3;
    c.batch_size = 2;
    c.total_steps = 6;
    c.checkpoint_every = 3;
    c.log_every = 1000;
    c.seed = 5;
    c.data.corpus_root = root.string();
    for (int k = 0; k < badges; ++k) c.data.badges.push_back((root / "badges" / ("badge_" + std::to_string(k) + ".png")).string());
    c.data.badge_mode = badges == 1 ? "single" : "multi";
    c.perceptual.backend = "random";
    c.perceptual.width = 4;
    c.output_dir = (root / "run").string();
    run.corpus = cpmark::corpus_for(c);
    run.badges = cpmark::badges_for(c);
    return run;
}

double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b) {
    return (a.to(torch::kDouble) - b.to(torch::kDouble)).abs().max().item<double>();
}

}  // namespace testing_support
