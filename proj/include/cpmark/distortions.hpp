#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace cpmark {

enum class DistortionKind { none = 0, jpeg = 1, gaussian_blur = 2, color_jitter = 3 };

std::string to_string(DistortionKind kind);

struct JitterParams {
    double brightness = 0.0;  // additive shift
    double contrast = 1.0;    // scale around the mean luma
    double saturation = 1.0;  // blend factor with per-pixel luma
    double hue = 0.0;         // rotation of the chroma plane, in turns
};

/// One sampled element of the training-time distortion family.
struct DistortionSpec {
    DistortionKind kind = DistortionKind::none;
    int jpeg_quality = 75;
    int blur_kernel = 3;
    double blur_sigma = 0.8;
    JitterParams jitter;
};

struct RobustnessConfig {
    // Order: none, jpeg, gaussian_blur, color_jitter.
    std::array<double, 4> kind_probabilities{0.25, 0.25, 0.25, 0.25};
    int quality_min = 25;
    int quality_max = 100;
    std::vector<int> blur_kernels{3, 5, 7, 9};
    double brightness = 0.1;
    std::array<double, 2> contrast{0.9, 1.1};
    std::array<double, 2> saturation{0.9, 1.1};
    double hue = 0.05;

    /// Throws ConfigError on probabilities not summing to 1, bad ranges, or even kernels.
    void validate() const;
};

/// Conventional sigma for a given kernel size: 0.3 * ((k - 1) / 2 - 1) + 0.8.
double blur_sigma_for_kernel(int kernel);

/// Differentiable JPEG simulation. Accepts (3,H,W) or (N,3,H,W) RGB in [0,1].
/// Sizes that are not multiples of 16 are reflect-padded and cropped back.
torch::Tensor diff_jpeg(const torch::Tensor& img, int quality);

/// Encodes with the real JPEG codec and decodes back. Not differentiable.
torch::Tensor real_jpeg_roundtrip(const torch::Tensor& img, int quality);

/// Normalized k x k Gaussian stencil (sums to one).
torch::Tensor gaussian_kernel(int kernel, double sigma, torch::Dtype dtype = torch::kFloat);

/// Depthwise Gaussian blur with reflect padding.
torch::Tensor gaussian_blur(const torch::Tensor& img, int kernel, double sigma);

torch::Tensor color_jitter(const torch::Tensor& img, const JitterParams& params);

DistortionSpec sample_transform(std::mt19937_64& rng, const RobustnessConfig& config);

/// Applies one spec to every image of `img`.
torch::Tensor apply(const DistortionSpec& spec, const torch::Tensor& img);

namespace jpeg {

/// IJG-scaled quantization tables, (8, 8) each, for the given quality.
torch::Tensor luma_table(int quality);
torch::Tensor chroma_table(int quality);

/// r(x) = round(x) + (x - round(x))^3
torch::Tensor soft_round(const torch::Tensor& x);

/// Orthonormal 8-point DCT-II basis; row u holds frequency u.
torch::Tensor dct_matrix(torch::Dtype dtype = torch::kFloat);

struct QuantizedCoefficients {
    torch::Tensor luma;    // (N, H/8, W/8, 8, 8) coefficients divided by the table, before rounding
    torch::Tensor chroma;  // (N, 2, H/16, W/16, 8, 8)
};

/// Exposes the pre-rounding coordinates of the pipeline; used to keep
/// finite-difference probes away from the surrogate's jumps at half-integers.
QuantizedCoefficients quantized_coefficients(const torch::Tensor& img, int quality);

}  // namespace jpeg
}  // namespace cpmark
