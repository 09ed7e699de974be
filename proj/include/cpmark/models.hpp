#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace cpmark {

struct ModelConfig {
    int base_channels = 32;
    int depth = 4;               // number of 2x downsamplings in each encoder-decoder net
    int pre_encoder_layers = 5;  // fixed
    int stn_hidden = 128;
    int image_side = 400;
    double amplitude = 1.0;      // delta = amplitude * tanh(.)
    int channel_doublings = -1;  // channels double for this many levels, then stay flat; -1 = every level
    int norm_groups = 4;         // GroupNorm groups after each 3x3 conv; 0 disables normalization

    /// Throws ConfigError when the configuration is inconsistent.
    void validate() const;
    int channels_at(int level) const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// conv3x3 -> GroupNorm -> LeakyReLU
struct ConvActImpl : torch::nn::Module {
    ConvActImpl(int in, int out, int norm_groups);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Conv2d conv{nullptr};
    torch::nn::GroupNorm norm{nullptr};
};
TORCH_MODULE(ConvAct);

struct PreEncoderImpl : torch::nn::Module {
    PreEncoderImpl(int layers, int channels, int norm_groups);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Sequential layers{nullptr};
};
TORCH_MODULE(PreEncoder);

/// Symmetric encoder-decoder with skip connections; returns pre-activation output.
struct EncoderDecoderImpl : torch::nn::Module {
    EncoderDecoderImpl(int in_channels, int out_channels, const ModelConfig& cfg);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::ModuleList down{nullptr};
    torch::nn::ModuleList up{nullptr};
    torch::nn::Conv2d head{nullptr};
};
TORCH_MODULE(EncoderDecoder);

/// Localization net predicting a 2x3 affine matrix, followed by bilinear resampling.
struct SpatialTransformerImpl : torch::nn::Module {
    explicit SpatialTransformerImpl(int hidden);
    torch::Tensor theta(const torch::Tensor& x);
    torch::Tensor forward(const torch::Tensor& x);

    torch::nn::Sequential features{nullptr};
    torch::nn::Linear fc{nullptr};
    torch::nn::Linear affine{nullptr};
};
TORCH_MODULE(SpatialTransformer);

struct CopyrightNetImpl : torch::nn::Module {
    explicit CopyrightNetImpl(const ModelConfig& cfg);

    PreEncoder pre_encoder{nullptr};
    EncoderDecoder encoder{nullptr};
    EncoderDecoder decoder{nullptr};
    SpatialTransformer stn{nullptr};
};
TORCH_MODULE(CopyrightNet);

/// Network weights, optimizer moments, and the step counter.
struct ModelState {
    ModelConfig config;
    CopyrightNet net{nullptr};
    std::shared_ptr<torch::optim::Adam> optimizer;  // null until training starts
    int64_t step = 0;

    /// Deep copy of weights and optimizer moments.
    ModelState clone() const;
    std::vector<torch::Tensor> parameters() const { return net->parameters(); }
};

ModelState init_state(const ModelConfig& config, uint64_t seed);

/// Badge image(s) -> feature map with base_channels channels at full resolution.
torch::Tensor pre_encode(const torch::Tensor& cp_image, const ModelState& state);

/// Host and badge features -> perturbation bounded by the amplitude scale.
torch::Tensor encode(const torch::Tensor& host, const torch::Tensor& cp_features, const ModelState& state);

/// clamp(host + delta, 0, 1)
torch::Tensor apply_perturbation(const torch::Tensor& host, const torch::Tensor& delta);

torch::Tensor stn_transform(const torch::Tensor& img, const ModelState& state);

/// Resamples `img` through affine matrices `theta` (N, 2, 3) in normalized
/// coordinates with bilinear interpolation and zero padding.
torch::Tensor warp_affine(const torch::Tensor& img, const torch::Tensor& theta);

/// Recovers the badge: sigmoid(decoder(stn(cimg))).
torch::Tensor decode(const torch::Tensor& cimg, const ModelState& state);

/// Writes weights, optimizer moments, config, and step. `extra` lands in the metadata.
void save_checkpoint(const ModelState& state, const std::filesystem::path& path,
                     const nlohmann::json& extra = nlohmann::json::object());

struct LoadedCheckpoint {
    ModelState state;
    nlohmann::json extra;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Creates the Adam optimizer over every trainable parameter if it does not exist yet.
void ensure_optimizer(ModelState& state, double lr);

}  // namespace cpmark
