#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include <torch/torch.h>

#include "cpmark/imaging.hpp"

namespace cpmark {

enum class Split { train, test };
enum class BadgeMode { single, multi };

std::string to_string(Split s);
std::string to_string(BadgeMode m);
Split split_from_string(const std::string& s);        // throws ConfigError
BadgeMode badge_mode_from_string(const std::string& s);  // throws ConfigError

struct Corpus {
    std::filesystem::path root;
    Split split = Split::train;
    std::vector<std::filesystem::path> image_paths;  // sorted

    size_t size() const { return image_paths.size(); }
};

/// Recursively lists *.png / *.jpg / *.jpeg (any case) under `dir`, sorted lexicographically.
/// Throws IoError when `dir` is not a directory and FormatError when nothing is found.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// Images under <root>/<split>.
Corpus scan_corpus(const std::filesystem::path& root, Split split);

struct BadgeSet {
    std::vector<ImageTensor> badges;
    std::vector<std::filesystem::path> paths;  // empty for in-memory badges
    BadgeMode mode = BadgeMode::single;

    /// Loads every path at side x side. single needs exactly one path, multi at least two.
    static BadgeSet load(const std::vector<std::filesystem::path>& paths, int side, BadgeMode mode);
    static BadgeSet from_tensors(const std::vector<torch::Tensor>& images, BadgeMode mode);

    void validate() const;  // throws ContractViolation
    size_t size() const { return badges.size(); }
    torch::Tensor stacked() const;  // (K, 3, H, W)
};

/// 64-bit FNV-1a of the 8-bit quantized pixels; identifies a badge independent of its file name.
uint64_t badge_fingerprint(const torch::Tensor& img);

struct Batch {
    torch::Tensor hosts;    // (B, 3, H, W)
    torch::Tensor badges;   // (B, 3, H, W), row i pairs with hosts[i]
    torch::Tensor badge_ids;  // (B) int64 index into the badge set
    std::vector<size_t> host_ids;
};

/// Deterministic stream of host/badge batches.
///
/// Each epoch is a fresh permutation of the corpus drawn from (seed, epoch);
/// the trailing partial batch is dropped. Badge choices in multi mode come
/// from (seed, step). Either way, batch k depends only on (seed, k), so
/// seek() reproduces any position exactly.
class BatchStream {
public:
    BatchStream(Corpus corpus, BadgeSet badges, int batch_size, int side, uint64_t seed);

    Batch next();
    void seek(int64_t step);
    int64_t position() const { return step_; }
    int64_t batches_per_epoch() const;

    const Corpus& corpus() const { return corpus_; }
    const BadgeSet& badge_set() const { return badges_; }

private:
    const std::vector<size_t>& order_for_epoch(int64_t epoch);
    const torch::Tensor& host(size_t index);

    Corpus corpus_;
    BadgeSet badges_;
    torch::Tensor badge_stack_;
    int batch_size_;
    int side_;
    uint64_t seed_;
    int64_t step_ = 0;
    int64_t cached_epoch_ = -1;
    std::vector<size_t> order_;
    std::unordered_map<size_t, torch::Tensor> cache_;
};

/// Loads every image of `paths` into one (N, 3, side, side) tensor.
torch::Tensor load_stack(const std::vector<std::filesystem::path>& paths, int side);

}  // namespace cpmark
