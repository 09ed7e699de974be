#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include <torch/torch.h>

#include "cpmark/models.hpp"
#include "cpmark/training.hpp"

namespace testing_support {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "cpmark");
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

torch::Tensor random_image(int64_t h, int64_t w, uint64_t seed, torch::Dtype dtype = torch::kFloat);
torch::Tensor checkerboard(int64_t side, int64_t cell);

// Small network that runs in milliseconds.
cpmark::ModelConfig tiny_model(int side = 32);

// Tiny corpus + badge written to disk, and a training config pointing at it.
struct ToyRun {
    cpmark::TrainConfig cfg;
    cpmark::Corpus corpus;
    cpmark::BadgeSet badges;
};
ToyRun toy_run(const std::filesystem::path& root, int images = 4, int side = 32, int badges = 1);

// Largest |a - b|.
double max_abs_diff(const torch::Tensor& a, const torch::Tensor& b);

}  // namespace testing_support
