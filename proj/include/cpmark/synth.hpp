#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <torch/torch.h>

namespace cpmark::synth {

/// Smooth color field with a few filled ellipses, light noise, and a slight blur.
/// Same (index, seed) -> same pixels.
torch::Tensor host_image(int index, int side, uint64_t seed);

/// White canvas with a colored ring and a short label; `variant` changes colors.
torch::Tensor badge_image(int side, const std::string& label = "CP", int variant = 0);

struct CorpusSpec {
    int train = 20;
    int test = 8;
    int side = 128;
    int badges = 1;
    uint64_t seed = 0;
};

/// Writes <root>/train/*.png, <root>/test/*.png and <root>/badges/badge_<k>.png.
void write_corpus(const std::filesystem::path& root, const CorpusSpec& spec);

}  // namespace cpmark::synth
