#include "cpmark/imaging.hpp"

#include <cstring>
#include <fstream>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "cpmark/errors.hpp"

namespace cpmark {
namespace {

using color::Bt601;

constexpr double kUScale = 0.5 / (1.0 - Bt601::kb);  // U = kUScale * (B - Y)
constexpr double kVScale = 0.5 / (1.0 - Bt601::kr);  // V = kVScale * (R - Y)

torch::Tensor single_image(const torch::Tensor& t, const char* what) {
    if (t.dim() == 4) {
        detail::require(t.size(0) == 1, std::string(what) + ": expected a single image, got a batch");
        return t[0];
    }
    detail::require(t.dim() == 3 && t.size(0) == 3,
                    std::string(what) + ": expected a (3, H, W) image");
    return t;
}

void write_bytes(const std::filesystem::path& path, const std::vector<uchar>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace

namespace color {

torch::Tensor rgb_to_yuv(const torch::Tensor& rgb) {
    detail::require(rgb.dim() >= 3 && rgb.size(-3) == 3, "rgb_to_yuv: channel axis must have size 3");
    auto r = rgb.select(-3, 0);
    auto g = rgb.select(-3, 1);
    auto b = rgb.select(-3, 2);
    auto y = Bt601::kr * r + Bt601::kg * g + Bt601::kb * b;
    auto u = kUScale * (b - y) + 0.5;
    auto v = kVScale * (r - y) + 0.5;
    return torch::stack({y, u, v}, -3);
}

torch::Tensor yuv_to_rgb(const torch::Tensor& yuv) {
    detail::require(yuv.dim() >= 3 && yuv.size(-3) == 3, "yuv_to_rgb: channel axis must have size 3");
    auto y = yuv.select(-3, 0);
    auto u = yuv.select(-3, 1) - 0.5;
    auto v = yuv.select(-3, 2) - 0.5;
    auto r = y + v / kVScale;
    auto b = y + u / kUScale;
    auto g = (y - Bt601::kr * r - Bt601::kb * b) / Bt601::kg;
    return torch::stack({r, g, b}, -3);
}

torch::Tensor luma(const torch::Tensor& rgb) {
    return (Bt601::kr * rgb.select(-3, 0) + Bt601::kg * rgb.select(-3, 1) +
            Bt601::kb * rgb.select(-3, 2))
        .unsqueeze(-3);
}

}  // namespace color

torch::Tensor clamp_unit(const torch::Tensor& x) { return x.clamp(0.0, 1.0); }

torch::Tensor quantize_8bit(const torch::Tensor& x) {
    return (x.clamp(0.0, 1.0) * 255.0).round() / 255.0;
}

cv::Mat to_bgr8(const torch::Tensor& chw) {
    auto img = single_image(chw, "to_bgr8");
    auto bytes = (img.detach().to(torch::kFloat).clamp(0.0, 1.0) * 255.0)
                     .round()
                     .to(torch::kUInt8)
                     .flip({0})
                     .permute({1, 2, 0})
                     .contiguous();
    cv::Mat mat(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC3);
    std::memcpy(mat.data, bytes.data_ptr<uint8_t>(), static_cast<size_t>(bytes.numel()));
    return mat;
}

torch::Tensor from_bgr8(const cv::Mat& bgr) {
    detail::require(bgr.type() == CV_8UC3, "from_bgr8: expected an 8-bit 3-channel image");
    cv::Mat contiguous = bgr.isContinuous() ? bgr : bgr.clone();
    auto t = torch::from_blob(contiguous.data, {contiguous.rows, contiguous.cols, 3}, torch::kUInt8);
    return t.permute({2, 0, 1}).flip({0}).to(torch::kFloat).div(255.0).contiguous();
}

ImageTensor load_image(const std::filesystem::path& path, int side) {
    detail::require(side > 0, "load_image: side must be positive");
    if (!std::filesystem::is_regular_file(path))
        throw IoError("no such image file: '" + path.string() + "'");
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw FormatError("cannot decode image '" + path.string() + "'");

    cv::Mat f32;
    bgr.convertTo(f32, CV_32FC3, 1.0 / 255.0);
    if (f32.rows != side || f32.cols != side) {
        cv::Mat resized;
        cv::resize(f32, resized, cv::Size(side, side), 0, 0, cv::INTER_LINEAR);
        f32 = resized;
    }
    auto t = torch::from_blob(f32.data, {side, side, 3}, torch::kFloat)
                 .permute({2, 0, 1})
                 .flip({0})
                 .contiguous();
    return {t, ColorSpace::RGB};
}

std::vector<std::uint8_t> encode_png(const torch::Tensor& chw) {
    std::vector<uchar> buf;
    if (!cv::imencode(".png", to_bgr8(chw), buf)) throw IoError("PNG encoding failed");
    return buf;
}

std::vector<std::uint8_t> encode_jpeg(const torch::Tensor& chw, int quality) {
    detail::require(quality >= 1 && quality <= 100, "encode_jpeg: quality must be in [1, 100]");
    std::vector<uchar> buf;
    const std::vector<int> params{cv::IMWRITE_JPEG_QUALITY, quality};
    if (!cv::imencode(".jpg", to_bgr8(chw), buf, params)) throw IoError("JPEG encoding failed");
    return buf;
}

torch::Tensor decode_image_bytes(const std::vector<std::uint8_t>& bytes) {
    cv::Mat bgr = cv::imdecode(bytes, cv::IMREAD_COLOR);
    if (bgr.empty()) throw FormatError("cannot decode in-memory image");
    return from_bgr8(bgr);
}

void save_image(const ImageTensor& img, const std::filesystem::path& path, bool lossless,
                int jpeg_quality) {
    detail::require(img.space == ColorSpace::RGB, "save_image: image must be RGB");
    auto chw = single_image(img.data, "save_image");
    detail::require(torch::isfinite(chw).all().item<bool>(), "save_image: non-finite pixel values");
    write_bytes(path, lossless ? encode_png(chw) : encode_jpeg(chw, jpeg_quality));
}

ImageTensor rgb_to_yuv(const ImageTensor& img) {
    detail::require(img.space == ColorSpace::RGB, "rgb_to_yuv: input is already YUV");
    return {color::rgb_to_yuv(img.data), ColorSpace::YUV};
}

ImageTensor yuv_to_rgb(const ImageTensor& img) {
    detail::require(img.space == ColorSpace::YUV, "yuv_to_rgb: input is not YUV");
    return {clamp_unit(color::yuv_to_rgb(img.data)), ColorSpace::RGB};
}

}  // namespace cpmark
