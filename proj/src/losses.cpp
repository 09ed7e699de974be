#include "cpmark/losses.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <iostream>

#include "cpmark/archive.hpp"
#include "cpmark/errors.hpp"
#include "cpmark/imaging.hpp"

namespace cpmark {
namespace {

namespace nn = torch::nn;

constexpr double kNormEps = 1e-10;

torch::Tensor as_batch(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    detail::require(a.sizes() == b.sizes(), std::string(what) + ": input shapes differ");
}

torch::Tensor unit_normalize(const torch::Tensor& f) {
    return f * torch::rsqrt((f * f).sum(1, /*keepdim=*/true) + kNormEps);
}

// sqrt that is exactly zero with a zero (not NaN) gradient at the origin.
torch::Tensor safe_sqrt(const torch::Tensor& v) {
    auto positive = v > 0;
    auto filled = torch::where(positive, v, torch::ones_like(v));
    return torch::where(positive, torch::sqrt(filled), torch::zeros_like(v));
}

nn::Conv2d conv3x3(int in, int out) { return nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)); }

void freeze(nn::Sequential& s) {
    for (auto& p : s->parameters()) p.set_requires_grad(false);
}

}  // namespace

PerceptualBackend PerceptualBackend::deterministic(uint64_t seed, int width) {
    detail::require(width > 0, "perceptual backend width must be positive");
    PerceptualBackend b;
    b.name_ = "deterministic-random-w" + std::to_string(width);
    b.taps_.push_back({nn::Sequential(conv3x3(3, width), nn::ReLU()), {}});
    b.taps_.push_back({nn::Sequential(nn::MaxPool2d(nn::MaxPool2dOptions(2)), conv3x3(width, 2 * width), nn::ReLU()), {}});
    b.taps_.push_back(
        {nn::Sequential(nn::MaxPool2d(nn::MaxPool2dOptions(2)), conv3x3(2 * width, 2 * width), nn::ReLU()), {}});

    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    torch::NoGradGuard no_grad;
    for (auto& tap : b.taps_) {
        int64_t out_channels = 0;
        for (auto& item : tap.stage->named_parameters()) {
            auto& p = item.value();
            if (p.dim() == 4) {
                const double stddev = std::sqrt(2.0 / static_cast<double>(p[0].numel()));
                p.copy_(torch::randn(p.sizes(), gen) * stddev);
                out_channels = p.size(0);
            } else {
                p.zero_();
            }
        }
        tap.channel_weights = torch::ones({out_channels});
        freeze(tap.stage);
    }
    return b;
}

PerceptualBackend PerceptualBackend::identity() {
    PerceptualBackend b;
    b.name_ = "identity";
    b.map_to_signed_ = false;
    b.taps_.push_back({nn::Sequential(), torch::ones({3})});
    return b;
}

PerceptualBackend PerceptualBackend::vgg16(const std::filesystem::path& weights) {
    auto archive = TensorArchive::read(weights);
    if (archive.meta.value("kind", "") != "perceptual_backend" || archive.meta.value("layout", "") != "vgg16")
        throw FormatError("'" + weights.string() + "' is not a vgg16 perceptual backend archive");

    // Conv indices of torchvision's vgg16().features, grouped by LPIPS tap.
    const std::vector<std::vector<int>> groups{{0, 2}, {5, 7}, {10, 12, 14}, {17, 19, 21}, {24, 26, 28}};
    PerceptualBackend b;
    b.name_ = "vgg16-lpips";
    torch::NoGradGuard no_grad;
    for (size_t g = 0; g < groups.size(); ++g) {
        nn::Sequential stage;
        if (g > 0) stage->push_back(nn::MaxPool2d(nn::MaxPool2dOptions(2).stride(2)));
        for (int idx : groups[g]) {
            const auto& w = archive.at("features." + std::to_string(idx) + ".weight");
            const auto& bias = archive.at("features." + std::to_string(idx) + ".bias");
            auto conv = conv3x3(static_cast<int>(w.size(1)), static_cast<int>(w.size(0)));
            conv->weight.copy_(w);
            conv->bias.copy_(bias);
            stage->push_back(conv);
            stage->push_back(nn::ReLU());
        }
        freeze(stage);
        b.taps_.push_back({stage, archive.at("lin" + std::to_string(g) + ".weight").flatten().clone()});
    }
    b.shift_ = torch::tensor({-0.030f, -0.088f, -0.188f}).view({1, 3, 1, 1});
    b.scale_ = torch::tensor({0.458f, 0.448f, 0.450f}).view({1, 3, 1, 1});
    return b;
}

PerceptualBackend PerceptualBackend::from_weights_path(const std::string& weights) {
    if (!weights.empty() && std::filesystem::exists(weights)) return vgg16(weights);
    std::cerr << "warning: perceptual backend weights "
              << (weights.empty() ? std::string("not configured") : "'" + weights + "' not found")
              << "; using the deterministic random feature backend\n";
    return deterministic();
}

torch::Tensor PerceptualBackend::scale_input(const torch::Tensor& x) const {
    auto out = map_to_signed_ ? x * 2.0 - 1.0 : x;
    if (shift_.defined()) out = (out - shift_.to(out.scalar_type())) / scale_.to(out.scalar_type());
    return out;
}

std::vector<torch::Tensor> PerceptualBackend::taps(const torch::Tensor& x) const {
    std::vector<torch::Tensor> out;
    auto h = scale_input(as_batch(x));
    for (const auto& tap : taps_) {
        h = tap.stage->is_empty() ? h : tap.stage.ptr()->forward(h);
        out.push_back(h);
    }
    return out;
}

torch::Tensor PerceptualBackend::distance(const torch::Tensor& x, const torch::Tensor& y) const {
    check_same_shape(x, y, "lpips");
    const auto fx = taps(x);
    const auto fy = taps(y);
    torch::Tensor total;
    for (size_t i = 0; i < taps_.size(); ++i) {
        auto diff = unit_normalize(fx[i]) - unit_normalize(fy[i]);
        auto w = taps_[i].channel_weights.to(diff.scalar_type()).view({1, -1, 1, 1});
        auto d = (w * diff * diff).sum(1).mean({1, 2});
        total = total.defined() ? total + d : d;
    }
    return total;
}

torch::Tensor PerceptualBackend::embed(const torch::Tensor& x) const {
    std::vector<torch::Tensor> pooled;
    for (const auto& f : taps(x)) pooled.push_back(f.mean({2, 3}));
    return torch::cat(pooled, 1);
}

std::vector<torch::Tensor> PerceptualBackend::parameters() const {
    std::vector<torch::Tensor> out;
    for (const auto& tap : taps_) {
        for (const auto& p : tap.stage->parameters()) out.push_back(p);
        out.push_back(tap.channel_weights);
    }
    return out;
}

void PerceptualBackend::to(torch::Dtype dtype) {
    for (auto& tap : taps_) {
        tap.stage->to(dtype);
        tap.channel_weights = tap.channel_weights.to(dtype);
    }
    if (shift_.defined()) {
        shift_ = shift_.to(dtype);
        scale_ = scale_.to(dtype);
    }
}

torch::Tensor lpips(const torch::Tensor& x, const torch::Tensor& y, const PerceptualBackend& backend) {
    return backend.distance(x, y).mean();
}

torch::Tensor yuv_l2(const torch::Tensor& x, const torch::Tensor& y) {
    check_same_shape(x, y, "yuv_l2");
    auto diff = color::rgb_to_yuv(as_batch(x)) - color::rgb_to_yuv(as_batch(y));
    // Squared norm of the per-pixel YUV difference vector, averaged over pixels.
    auto mean_square = (diff * diff).sum(1).flatten(1).mean(1);
    return safe_sqrt(mean_square).mean();
}

torch::Tensor decode_mse(const torch::Tensor& cp, const torch::Tensor& decoded) {
    check_same_shape(cp, decoded, "decode_mse");
    auto diff = cp - decoded;
    return (diff * diff).mean();
}

LossBreakdown total_loss(const torch::Tensor& host, const torch::Tensor& encoded, const torch::Tensor& badge,
                         const torch::Tensor& decoded, const LossWeights& weights,
                         const PerceptualBackend& backend) {
    detail::require(weights.lambda1 >= 0.0 && weights.lambda2 >= 0.0, "loss weights must be non-negative");
    LossBreakdown out;
    out.enc = lpips(host, encoded, backend);
    out.dec = decode_mse(badge, decoded);
    out.yuv = yuv_l2(host, encoded);
    out.total = weights.lambda1 * out.enc + weights.lambda2 * out.dec + out.yuv;
    return out;
}

}  // namespace cpmark
