#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cpmark/dataset.hpp"
#include "cpmark/distortions.hpp"
#include "cpmark/losses.hpp"
#include "cpmark/models.hpp"
#include "json.hpp"

namespace cpmark {

struct DataConfig {
    std::string corpus_root;
    std::string split = "train";
    std::vector<std::string> badges;
    std::string badge_mode = "single";
};

struct PerceptualConfig {
    std::string backend = "vgg16";  // vgg16 | random | identity
    std::string weights;             // vgg16 archive; missing -> random backend with a warning
    int width = 8;                   // channel width of the random backend
    uint64_t seed = 0x1b1b5eedULL;
};

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 20;
    int64_t total_steps = 140000;
    std::optional<int64_t> warmup_steps;  // absent: 5% of total_steps
    LossWeights weights;
    RobustnessConfig robustness;
    uint64_t seed = 0;
    int64_t checkpoint_every = 10000;
    std::optional<double> hard_epsilon;
    int log_every = 50;

    ModelConfig model;
    DataConfig data;
    PerceptualConfig perceptual;
    std::string output_dir = "runs/default";

    int64_t effective_warmup() const;
    void validate() const;  // throws ConfigError naming the key
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);  // unknown keys -> ConfigError

/// Reads a JSON config and applies "dotted.key=value" overrides on top.
/// Values parse as JSON when they can and as plain strings otherwise.
TrainConfig load_train_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Linear ramp lr * (step + 1) / warmup during warmup, then lr.
double lr_schedule(int64_t step, const TrainConfig& cfg);

PerceptualBackend make_backend(const PerceptualConfig& cfg);

/// Intermediate tensors of one step, for inspection.
struct StepTrace {
    torch::Tensor delta;
    torch::Tensor encoded;
    torch::Tensor distorted;
    torch::Tensor decoded;
    std::vector<DistortionSpec> specs;
    double lr = 0.0;
};

/// One Adam update of every trainable parameter against total_loss.
/// Mutates `state` in place (step incremented). Throws DivergenceError on a
/// non-finite loss term before touching the weights.
LossBreakdown train_step(const Batch& batch, ModelState& state, const TrainConfig& cfg,
                         const PerceptualBackend& backend, std::mt19937_64& rng, StepTrace* trace = nullptr);

struct TrainOptions {
    std::optional<std::filesystem::path> resume_from;
    std::optional<int64_t> stop_after;  // stop early (after this absolute step) without finishing the run
    bool quiet = false;
};

struct TrainResult {
    std::filesystem::path checkpoint;
    std::filesystem::path metrics_csv;
    int64_t steps_run = 0;
};

/// Runs the configured number of steps, writing <output_dir>/metrics.csv,
/// periodic checkpoints, and <output_dir>/final.ckpt. On divergence writes
/// <output_dir>/diverged.ckpt (the last good state) and rethrows.
TrainResult train(const TrainConfig& cfg, const Corpus& corpus, const BadgeSet& badges,
                  const TrainOptions& opts = {});

/// Loads corpus and badges described by cfg.data at cfg.model.image_side.
Corpus corpus_for(const TrainConfig& cfg);
BadgeSet badges_for(const TrainConfig& cfg);

/// Reads the metrics CSV back as rows of doubles (header skipped).
std::vector<std::vector<double>> read_metrics_csv(const std::filesystem::path& path);

}  // namespace cpmark
