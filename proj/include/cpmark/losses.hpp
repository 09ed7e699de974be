#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace cpmark {

struct LossWeights {
    double lambda1 = 10.0;  // perceptual term
    double lambda2 = 15.0;  // decode term
};

/// Frozen feature stack used by the perceptual distance and as the FID embedder.
///
/// The distance is the LPIPS form: for every tap, features are unit-normalized
/// over channels, the squared difference is weighted per channel, summed over
/// channels and averaged over pixels; taps are summed.
class PerceptualBackend {
public:
    /// Fixed-seed random convolution stack. Runs offline; suitable for tests and desk-scale training.
    static PerceptualBackend deterministic(uint64_t seed = 0x1b1b5eedULL, int width = 8);

    /// One tap on the raw input with unit channel weights and no input scaling.
    static PerceptualBackend identity();

    /// VGG16 trunk with LPIPS linear heads from a tensor archive (see tools/export_lpips_vgg16.py).
    static PerceptualBackend vgg16(const std::filesystem::path& weights);

    /// `weights` empty or missing -> deterministic backend plus a warning on stderr.
    static PerceptualBackend from_weights_path(const std::string& weights);

    /// Per-sample distances, shape (N). Differentiable w.r.t. both inputs.
    torch::Tensor distance(const torch::Tensor& x, const torch::Tensor& y) const;

    /// Globally pooled tap activations, shape (N, D).
    torch::Tensor embed(const torch::Tensor& x) const;

    std::vector<torch::Tensor> parameters() const;
    const std::string& name() const { return name_; }

    /// Converts weights to `dtype` (float64 for gradient checks).
    void to(torch::Dtype dtype);

private:
    struct Tap {
        torch::nn::Sequential stage;  // applied to the previous tap's output
        torch::Tensor channel_weights;  // (C)
    };

    std::vector<torch::Tensor> taps(const torch::Tensor& x) const;
    torch::Tensor scale_input(const torch::Tensor& x) const;

    std::string name_;
    std::vector<Tap> taps_;
    bool map_to_signed_ = true;  // [0,1] -> [-1,1] before the first stage
    torch::Tensor shift_, scale_;  // optional per-channel normalization after the signed mapping
};

/// Mean perceptual distance over the batch.
torch::Tensor lpips(const torch::Tensor& x, const torch::Tensor& y, const PerceptualBackend& backend);

/// sqrt(mean over pixels of |YUV(x) - YUV(y)|^2), per image, averaged over the batch.
torch::Tensor yuv_l2(const torch::Tensor& x, const torch::Tensor& y);

/// Mean squared error over all elements.
torch::Tensor decode_mse(const torch::Tensor& cp, const torch::Tensor& decoded);

struct LossBreakdown {
    torch::Tensor total;
    torch::Tensor enc;  // perceptual term, unweighted
    torch::Tensor dec;  // decode MSE, unweighted
    torch::Tensor yuv;  // YUV RMS term
};

/// lambda1 * lpips(host, encoded) + lambda2 * mse(badge, decoded) + yuv_l2(host, encoded)
LossBreakdown total_loss(const torch::Tensor& host, const torch::Tensor& encoded, const torch::Tensor& badge,
                         const torch::Tensor& decoded, const LossWeights& weights,
                         const PerceptualBackend& backend);

}  // namespace cpmark
