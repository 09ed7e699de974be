#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <opencv2/core.hpp>
#include <torch/torch.h>

namespace cpmark {

enum class ColorSpace { RGB, YUV };

/// Real-valued image in [0,1]. `data` is either (3, H, W) or a batch
/// (N, 3, H, W); the channel axis is always dim -3.
struct ImageTensor {
    torch::Tensor data;
    ColorSpace space = ColorSpace::RGB;

    int64_t height() const { return data.size(-2); }
    int64_t width() const { return data.size(-1); }
    bool batched() const { return data.dim() == 4; }
};

/// Reads an 8-bit image and bilinearly resizes it to side x side.
/// Throws IoError when the file is missing and FormatError when it does not decode.
ImageTensor load_image(const std::filesystem::path& path, int side);

/// lossless=true writes PNG bytes holding round(v*255) whatever the file extension is;
/// lossless=false writes baseline JPEG at `jpeg_quality`.
void save_image(const ImageTensor& img, const std::filesystem::path& path, bool lossless,
                int jpeg_quality = 95);

ImageTensor rgb_to_yuv(const ImageTensor& img);
ImageTensor yuv_to_rgb(const ImageTensor& img);

torch::Tensor clamp_unit(const torch::Tensor& x);

/// The values a lossless save/load cycle would hand back: round(v*255)/255.
torch::Tensor quantize_8bit(const torch::Tensor& x);

// Differentiable tensor-level conversions shared by the losses and distortions.
// BT.601 full range, chroma offset +0.5 (the JPEG YCbCr convention).
namespace color {

torch::Tensor rgb_to_yuv(const torch::Tensor& rgb);
torch::Tensor yuv_to_rgb(const torch::Tensor& yuv);  // not clamped
torch::Tensor luma(const torch::Tensor& rgb);        // keeps a singleton channel axis

struct Bt601 {
    static constexpr double kr = 0.299;
    static constexpr double kg = 0.587;
    static constexpr double kb = 0.114;
};

}  // namespace color

// OpenCV bridges: 8-bit BGR HWC <-> float RGB CHW.
cv::Mat to_bgr8(const torch::Tensor& chw);
torch::Tensor from_bgr8(const cv::Mat& bgr);

/// Decodes an in-memory PNG/JPEG into a (3, H, W) tensor.
torch::Tensor decode_image_bytes(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_png(const torch::Tensor& chw);
std::vector<std::uint8_t> encode_jpeg(const torch::Tensor& chw, int quality);

}  // namespace cpmark
