#include "cpmark/distortions.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "cpmark/errors.hpp"
#include "cpmark/imaging.hpp"

namespace cpmark {
namespace {

namespace F = torch::nn::functional;

// ITU T.81 Annex K tables.
constexpr std::array<int, 64> kLumaBase{
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

constexpr std::array<int, 64> kChromaBase{
    17, 18, 24, 47, 99, 99, 99, 99,  //
    18, 21, 26, 66, 99, 99, 99, 99,  //
    24, 26, 56, 99, 99, 99, 99, 99,  //
    47, 66, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99,  //
    99, 99, 99, 99, 99, 99, 99, 99};

void check_quality(int quality) {
    detail::require(quality >= 25 && quality <= 100,
                    "JPEG quality must lie in [25, 100], got " + std::to_string(quality));
}

torch::Tensor scaled_table(const std::array<int, 64>& base, int quality) {
    check_quality(quality);
    const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    std::array<float, 64> out{};
    for (size_t i = 0; i < base.size(); ++i)
        out[i] = static_cast<float>(std::clamp((base[i] * scale + 50) / 100, 1, 255));
    return torch::from_blob(out.data(), {8, 8}, torch::kFloat).clone();
}

torch::Tensor as_batch(const torch::Tensor& img, const char* what) {
    auto x = img.dim() == 3 ? img.unsqueeze(0) : img;
    detail::require(x.dim() == 4 && x.size(1) == 3,
                    std::string(what) + ": expected (3,H,W) or (N,3,H,W) RGB");
    return x;
}

torch::Tensor like_input(const torch::Tensor& out, const torch::Tensor& img) {
    return img.dim() == 3 ? out.squeeze(0) : out;
}

// (M, H, W) -> (M, H/8, W/8, 8, 8)
torch::Tensor to_blocks(const torch::Tensor& plane) {
    const auto m = plane.size(0), h = plane.size(1), w = plane.size(2);
    return plane.reshape({m, h / 8, 8, w / 8, 8}).permute({0, 1, 3, 2, 4});
}

torch::Tensor from_blocks(const torch::Tensor& blocks) {
    const auto m = blocks.size(0), hb = blocks.size(1), wb = blocks.size(2);
    return blocks.permute({0, 1, 3, 2, 4}).reshape({m, hb * 8, wb * 8});
}

struct JpegPlanes {
    torch::Tensor luma;    // (N, H, W), level-shifted to [-128, 127]
    torch::Tensor chroma;  // (N*2, H/2, W/2), subsampled
    int64_t batch = 0;
    int64_t height = 0;
    int64_t width = 0;
    int64_t pad_h = 0;
    int64_t pad_w = 0;
};

JpegPlanes split_planes(const torch::Tensor& img) {
    auto x = as_batch(img, "diff_jpeg");
    JpegPlanes p;
    p.batch = x.size(0);
    p.pad_h = (16 - x.size(2) % 16) % 16;
    p.pad_w = (16 - x.size(3) % 16) % 16;
    if (p.pad_h || p.pad_w) {
        const bool can_reflect = p.pad_h < x.size(2) && p.pad_w < x.size(3);
        auto opts = F::PadFuncOptions({0, p.pad_w, 0, p.pad_h});
        x = F::pad(x, can_reflect ? opts.mode(torch::kReflect) : opts.mode(torch::kReplicate));
    }
    p.height = x.size(2);
    p.width = x.size(3);
    auto ycc = color::rgb_to_yuv(x) * 255.0 - 128.0;
    p.luma = ycc.select(1, 0);
    p.chroma = F::avg_pool2d(ycc.slice(1, 1, 3), F::AvgPool2dFuncOptions(2))
                   .reshape({p.batch * 2, p.height / 2, p.width / 2});
    return p;
}

torch::Tensor forward_dct(const torch::Tensor& blocks) {
    auto d = jpeg::dct_matrix(blocks.scalar_type());
    return torch::matmul(torch::matmul(d, blocks), d.t());
}

torch::Tensor inverse_dct(const torch::Tensor& coef) {
    auto d = jpeg::dct_matrix(coef.scalar_type());
    return torch::matmul(torch::matmul(d.t(), coef), d);
}

torch::Tensor quantize_plane(const torch::Tensor& plane, const torch::Tensor& table) {
    auto t = table.to(plane.scalar_type());
    auto coef = forward_dct(to_blocks(plane));
    auto restored = jpeg::soft_round(coef / t) * t;
    return from_blocks(inverse_dct(restored));
}

// Triangle-filter 2x upsampling, the decoder's default ("fancy") chroma path:
// each output sample is 3/4 its own source sample plus 1/4 the nearest neighbour, per axis.
torch::Tensor upsample_chroma(const torch::Tensor& c) {
    const auto n = c.size(0), ch = c.size(1), h = c.size(2), w = c.size(3);
    auto p = F::pad(c, F::PadFuncOptions({0, 0, 1, 1}).mode(torch::kReplicate));
    auto above = 0.75 * c + 0.25 * p.slice(2, 0, h);
    auto below = 0.75 * c + 0.25 * p.slice(2, 2, h + 2);
    auto v = torch::stack({above, below}, 3).reshape({n, ch, 2 * h, w});
    p = F::pad(v, F::PadFuncOptions({1, 1, 0, 0}).mode(torch::kReplicate));
    auto left = 0.75 * v + 0.25 * p.slice(3, 0, w);
    auto right = 0.75 * v + 0.25 * p.slice(3, 2, w + 2);
    return torch::stack({left, right}, 4).reshape({n, ch, 2 * h, 2 * w});
}

}  // namespace

std::string to_string(DistortionKind kind) {
    switch (kind) {
        case DistortionKind::none: return "none";
        case DistortionKind::jpeg: return "jpeg";
        case DistortionKind::gaussian_blur: return "gaussian_blur";
        case DistortionKind::color_jitter: return "color_jitter";
    }
    return "unknown";
}

void RobustnessConfig::validate() const {
    double sum = 0.0;
    for (double p : kind_probabilities) {
        if (!(p >= 0.0)) throw ConfigError("kind probabilities must be non-negative", "robustness.kind_probabilities");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw ConfigError("kind probabilities must sum to 1 (got " + std::to_string(sum) + ")",
                          "robustness.kind_probabilities");
    if (quality_min < 25 || quality_max > 100 || quality_min > quality_max)
        throw ConfigError("JPEG quality range must satisfy 25 <= min <= max <= 100", "robustness.quality_min");
    if (blur_kernels.empty()) throw ConfigError("blur kernel set is empty", "robustness.blur_kernels");
    for (int k : blur_kernels) {
        if (k != 3 && k != 5 && k != 7 && k != 9)
            throw ConfigError("blur kernels must be drawn from {3,5,7,9}, got " + std::to_string(k),
                              "robustness.blur_kernels");
    }
    if (brightness < 0.0) throw ConfigError("brightness range must be non-negative", "robustness.brightness");
    if (hue < 0.0 || hue > 0.5) throw ConfigError("hue range must lie in [0, 0.5]", "robustness.hue");
    if (!(contrast[0] > 0.0 && contrast[0] <= contrast[1]))
        throw ConfigError("contrast range must be positive and ordered", "robustness.contrast");
    if (!(saturation[0] >= 0.0 && saturation[0] <= saturation[1]))
        throw ConfigError("saturation range must be non-negative and ordered", "robustness.saturation");
}

double blur_sigma_for_kernel(int kernel) { return 0.3 * ((kernel - 1) / 2.0 - 1.0) + 0.8; }

namespace jpeg {

torch::Tensor luma_table(int quality) { return scaled_table(kLumaBase, quality); }
torch::Tensor chroma_table(int quality) { return scaled_table(kChromaBase, quality); }

torch::Tensor soft_round(const torch::Tensor& x) {
    auto r = torch::round(x);
    return r + torch::pow(x - r, 3);
}

torch::Tensor dct_matrix(torch::Dtype dtype) {
    auto d = torch::empty({8, 8}, torch::kDouble);
    auto acc = d.accessor<double, 2>();
    for (int u = 0; u < 8; ++u) {
        const double alpha = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
        for (int x = 0; x < 8; ++x)
            acc[u][x] = alpha * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
    }
    return d.to(dtype);
}

QuantizedCoefficients quantized_coefficients(const torch::Tensor& img, int quality) {
    check_quality(quality);
    auto p = split_planes(img);
    const auto dtype = p.luma.scalar_type();
    QuantizedCoefficients q;
    q.luma = forward_dct(to_blocks(p.luma)) / luma_table(quality).to(dtype);
    auto c = forward_dct(to_blocks(p.chroma)) / chroma_table(quality).to(dtype);
    q.chroma = c.reshape({p.batch, 2, c.size(1), c.size(2), 8, 8});
    return q;
}

}  // namespace jpeg

torch::Tensor diff_jpeg(const torch::Tensor& img, int quality) {
    check_quality(quality);
    auto p = split_planes(img);

    auto y = quantize_plane(p.luma, jpeg::luma_table(quality));
    auto c = quantize_plane(p.chroma, jpeg::chroma_table(quality))
                 .reshape({p.batch, 2, p.height / 2, p.width / 2});
    c = upsample_chroma(c);

    auto ycc = torch::cat({y.unsqueeze(1), c}, 1);
    auto rgb = clamp_unit(color::yuv_to_rgb((ycc + 128.0) / 255.0));
    rgb = rgb.slice(2, 0, p.height - p.pad_h).slice(3, 0, p.width - p.pad_w);
    return like_input(rgb, img);
}

torch::Tensor real_jpeg_roundtrip(const torch::Tensor& img, int quality) {
    check_quality(quality);
    auto x = as_batch(img, "real_jpeg_roundtrip").detach();
    std::vector<torch::Tensor> out;
    out.reserve(static_cast<size_t>(x.size(0)));
    for (int64_t i = 0; i < x.size(0); ++i)
        out.push_back(decode_image_bytes(encode_jpeg(x[i], quality)));
    return like_input(torch::stack(out).to(img.scalar_type()), img);
}

torch::Tensor gaussian_kernel(int kernel, double sigma, torch::Dtype dtype) {
    detail::require(kernel > 0 && kernel % 2 == 1, "gaussian kernel size must be odd, got " + std::to_string(kernel));
    detail::require(sigma > 0.0, "gaussian sigma must be positive");
    const int half = kernel / 2;
    auto k = torch::empty({kernel, kernel}, torch::kDouble);
    auto acc = k.accessor<double, 2>();
    for (int i = -half; i <= half; ++i)
        for (int j = -half; j <= half; ++j)
            acc[i + half][j + half] = std::exp(-(i * i + j * j) / (2.0 * sigma * sigma));
    return (k / k.sum()).to(dtype);
}

torch::Tensor gaussian_blur(const torch::Tensor& img, int kernel, double sigma) {
    auto x = as_batch(img, "gaussian_blur");
    auto k = gaussian_kernel(kernel, sigma, x.scalar_type());
    const int half = kernel / 2;
    detail::require(half < x.size(2) && half < x.size(3), "gaussian_blur: kernel larger than image");
    auto padded = F::pad(x, F::PadFuncOptions({half, half, half, half}).mode(torch::kReflect));
    auto weight = k.expand({3, 1, kernel, kernel});
    auto out = F::conv2d(padded, weight, F::Conv2dFuncOptions().groups(3));
    return like_input(out, img);
}

torch::Tensor color_jitter(const torch::Tensor& img, const JitterParams& p) {
    auto x = as_batch(img, "color_jitter");
    if (p.brightness != 0.0) x = x + p.brightness;
    if (p.contrast != 1.0) {
        auto mean = color::luma(x).mean({1, 2, 3}, /*keepdim=*/true);
        x = (x - mean) * p.contrast + mean;
    }
    if (p.saturation != 1.0) {
        auto l = color::luma(x);
        x = l + p.saturation * (x - l);
    }
    if (p.hue != 0.0) {
        const double angle = p.hue * 2.0 * std::numbers::pi;
        const double c = std::cos(angle), s = std::sin(angle);
        auto yuv = color::rgb_to_yuv(x);
        auto y = yuv.select(1, 0);
        auto u = yuv.select(1, 1) - 0.5;
        auto v = yuv.select(1, 2) - 0.5;
        yuv = torch::stack({y, c * u - s * v + 0.5, s * u + c * v + 0.5}, 1);
        x = color::yuv_to_rgb(yuv);
    }
    return like_input(clamp_unit(x), img);
}

DistortionSpec sample_transform(std::mt19937_64& rng, const RobustnessConfig& config) {
    config.validate();
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    DistortionSpec spec;
    const double u = unit(rng);
    double cumulative = 0.0;
    int kind = 3;
    for (int i = 0; i < 4; ++i) {
        cumulative += config.kind_probabilities[static_cast<size_t>(i)];
        if (u < cumulative) {
            kind = i;
            break;
        }
    }
    // Guard against rounding in the cumulative sum landing on a zero-probability kind.
    while (config.kind_probabilities[static_cast<size_t>(kind)] == 0.0) --kind;
    spec.kind = static_cast<DistortionKind>(kind);

    auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    switch (spec.kind) {
        case DistortionKind::none: break;
        case DistortionKind::jpeg:
            spec.jpeg_quality = std::uniform_int_distribution<int>(config.quality_min, config.quality_max)(rng);
            break;
        case DistortionKind::gaussian_blur: {
            std::uniform_int_distribution<size_t> pick(0, config.blur_kernels.size() - 1);
            spec.blur_kernel = config.blur_kernels[pick(rng)];
            spec.blur_sigma = blur_sigma_for_kernel(spec.blur_kernel);
            break;
        }
        case DistortionKind::color_jitter:
            spec.jitter.brightness = uniform(-config.brightness, config.brightness);
            spec.jitter.contrast = uniform(config.contrast[0], config.contrast[1]);
            spec.jitter.saturation = uniform(config.saturation[0], config.saturation[1]);
            spec.jitter.hue = uniform(-config.hue, config.hue);
            break;
    }
    return spec;
}

torch::Tensor apply(const DistortionSpec& spec, const torch::Tensor& img) {
    switch (spec.kind) {
        case DistortionKind::none: return img;
        case DistortionKind::jpeg: return diff_jpeg(img, spec.jpeg_quality);
        case DistortionKind::gaussian_blur: return gaussian_blur(img, spec.blur_kernel, spec.blur_sigma);
        case DistortionKind::color_jitter: return color_jitter(img, spec.jitter);
    }
    throw ContractViolation("apply: unknown distortion kind");
}

}  // namespace cpmark
