#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "cpmark/losses.hpp"
#include "cpmark/models.hpp"
#include "json.hpp"

namespace cpmark {

constexpr double kPsnrCap = 100.0;

/// 10 log10(1 / MSE) over every element; identical inputs give kPsnrCap.
double psnr(const torch::Tensor& x, const torch::Tensor& y);

/// Mean SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, data range 1,
/// statistics over fully covered windows only, averaged over channels (and images).
double ssim(const torch::Tensor& x, const torch::Tensor& y);

struct GaussianStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;  // unbiased (n - 1)
};

/// Rows are samples. Needs at least two rows.
GaussianStats gaussian_stats(const torch::Tensor& features);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)); the square root trace is
/// taken as Tr sqrt(S_a^(1/2) S_b S_a^(1/2)) with negative eigenvalues clipped to zero.
double fid(const GaussianStats& a, const GaussianStats& b);
double fid(const torch::Tensor& features_a, const torch::Tensor& features_b);

struct SubjectiveResponses {
    // One entry per participant; each holds that participant's scores in 1..5.
    std::vector<std::vector<int>> positive;
    std::vector<std::vector<int>> negative;
    int n_pos = 4;
    int n_neg = 4;
};

/// (1/P) sum_p [ sum_i s_pi + sum_j (6 - s_pj) ]
double subjective_score(const SubjectiveResponses& r);

enum class PairCategory { encoded_vs_host, decoded_vs_badge, clean_decode_vs_badge, textwm_decode_vs_badge };
std::string to_string(PairCategory c);

struct MetricsReport {
    PairCategory category = PairCategory::encoded_vs_host;
    double ssim = 0.0;
    double psnr = 0.0;
    double lpips = 0.0;
    double fid = 0.0;  // NaN when fewer than two pairs
    int64_t n_pairs = 0;
    std::string label;  // e.g. badge name

    nlohmann::json to_json() const;
    static std::string csv_header();  // label,category,ssim,psnr,lpips,fid,n_pairs
    std::string csv_row() const;
};

/// Per-pair SSIM/PSNR/LPIPS averaged over the set, FID between the two sets
/// embedded by `backend`. `a` and `b` are (N, 3, H, W).
MetricsReport compare_sets(const torch::Tensor& a, const torch::Tensor& b, PairCategory category,
                           const PerceptualBackend& backend);

// Inference helpers. No gradients; processed in chunks to bound memory.
torch::Tensor encode_images(const ModelState& state, const torch::Tensor& hosts, const torch::Tensor& badge,
                            int64_t chunk = 8);
torch::Tensor decode_images(const ModelState& state, const torch::Tensor& images, int64_t chunk = 8);

/// Decodes un-encoded images and scores them against the badge.
MetricsReport control_clean_decode(const ModelState& state, const torch::Tensor& clean,
                                   const torch::Tensor& badge, const PerceptualBackend& backend);

struct TextOverlay {
    std::string text = "ACM MM 2023";
    int font_size = 18;  // cap height in pixels
    uint64_t seed = 0;
};

/// Stamps opaque white text with a 1-px black outline at a uniformly drawn
/// valid position on each image. Empty text returns the input unchanged.
/// Throws ContractViolation when the text raster does not fit.
torch::Tensor overlay_text(const torch::Tensor& images, const TextOverlay& overlay);

MetricsReport control_text_watermark(const ModelState& state, const torch::Tensor& encoded,
                                     const torch::Tensor& badge, const TextOverlay& overlay,
                                     const PerceptualBackend& backend);

void write_reports(const std::vector<MetricsReport>& reports, const std::string& csv_path);

}  // namespace cpmark
