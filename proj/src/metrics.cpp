#include "cpmark/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>

#include <opencv2/imgproc.hpp>

#include "cpmark/distortions.hpp"
#include "cpmark/errors.hpp"
#include "cpmark/rng.hpp"

namespace cpmark {
namespace {

torch::Tensor as_batch(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

void same_shape(const torch::Tensor& x, const torch::Tensor& y, const char* what) {
    detail::require(x.sizes() == y.sizes(), std::string(what) + ": shapes differ");
}

Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double psnr(const torch::Tensor& x, const torch::Tensor& y) {
    same_shape(x, y, "psnr");
    torch::NoGradGuard ng;
    const double mse = (x.to(torch::kDouble) - y.to(torch::kDouble)).pow(2).mean().item<double>();
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const torch::Tensor& x, const torch::Tensor& y) {
    same_shape(x, y, "ssim");
    torch::NoGradGuard ng;
    auto a = as_batch(x).to(torch::kDouble);
    auto b = as_batch(y).to(torch::kDouble);
    detail::require(a.dim() == 4, "ssim: expected (C,H,W) or (N,C,H,W)");
    detail::require(a.size(2) >= 11 && a.size(3) >= 11, "ssim: images must be at least 11x11");
    const int64_t c = a.size(1);

    auto g = gaussian_kernel(11, 1.5, torch::kDouble).view({1, 1, 11, 11}).expand({c, 1, 11, 11});
    auto filt = [&](const torch::Tensor& t) { return torch::nn::functional::conv2d(t, g, torch::nn::functional::Conv2dFuncOptions().groups(c)); };

    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    // Sample (n-1) covariance like the common reference implementation.
    constexpr double n = 121.0, cov_norm = n / (n - 1.0);
    auto ux = filt(a), uy = filt(b);
    auto vx = cov_norm * (filt(a * a) - ux * ux);
    auto vy = cov_norm * (filt(b * b) - uy * uy);
    auto vxy = cov_norm * (filt(a * b) - ux * uy);
    auto s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    return s.mean().item<double>();
}

GaussianStats gaussian_stats(const torch::Tensor& features) {
    detail::require(features.dim() == 2, "fid: features must be (N, D)");
    detail::require(features.size(0) >= 2, "fid: need at least two samples per set");
    auto f = features.detach().to(torch::kDouble).contiguous();
    const auto n = f.size(0), d = f.size(1);
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(f.data_ptr<double>(), n, d);
    GaussianStats s;
    s.mean = m.colwise().mean().transpose();
    Eigen::MatrixXd centered = m.rowwise() - s.mean.transpose();
    s.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
    return s;
}

double fid(const GaussianStats& a, const GaussianStats& b) {
    detail::require(a.mean.size() == b.mean.size(), "fid: feature dimensions differ");
    detail::require(a.cov.rows() == a.mean.size() && b.cov.rows() == b.mean.size(), "fid: malformed statistics");
    const double mean_term = (a.mean - b.mean).squaredNorm();
    const Eigen::MatrixXd sa = sym_sqrt(a.cov);
    Eigen::MatrixXd inner = sa * b.cov * sa;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double value = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, value);
}

double fid(const torch::Tensor& features_a, const torch::Tensor& features_b) {
    detail::require(features_a.dim() == 2 && features_b.dim() == 2 && features_a.size(1) == features_b.size(1),
                    "fid: feature dimensions differ");
    return fid(gaussian_stats(features_a), gaussian_stats(features_b));
}

double subjective_score(const SubjectiveResponses& r) {
    detail::require(!r.positive.empty(), "subjective_score: no participants");
    detail::require(r.positive.size() == r.negative.size(),
                    "subjective_score: positive and negative lists cover different participants");
    double total = 0.0;
    auto check = [](int s) { detail::require(s >= 1 && s <= 5, "subjective_score: score outside 1..5"); };
    for (size_t p = 0; p < r.positive.size(); ++p) {
        detail::require(static_cast<int>(r.positive[p].size()) == r.n_pos &&
                            static_cast<int>(r.negative[p].size()) == r.n_neg,
                        "subjective_score: participant " + std::to_string(p) + " has the wrong number of answers");
        for (int s : r.positive[p]) check(s), total += s;
        for (int s : r.negative[p]) check(s), total += 6 - s;
    }
    return total / static_cast<double>(r.positive.size());
}

std::string to_string(PairCategory c) {
    switch (c) {
        case PairCategory::encoded_vs_host: return "encoded_vs_host";
        case PairCategory::decoded_vs_badge: return "decoded_vs_badge";
        case PairCategory::clean_decode_vs_badge: return "clean_decode_vs_badge";
        case PairCategory::textwm_decode_vs_badge: return "textwm_decode_vs_badge";
    }
    return "unknown";
}

nlohmann::json MetricsReport::to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"label", label},  {"category", to_string(category)}, {"ssim", num(ssim)}, {"psnr", num(psnr)},
            {"lpips", num(lpips)}, {"fid", num(fid)},                 {"n_pairs", n_pairs}};
}

std::string MetricsReport::csv_header() { return "label,category,ssim,psnr,lpips,fid,n_pairs"; }

std::string MetricsReport::csv_row() const {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%s,%.6f,%.4f,%.6f,%.6f,%lld", label.c_str(), to_string(category).c_str(), ssim,
                  psnr, lpips, fid, static_cast<long long>(n_pairs));
    return buf;
}

MetricsReport compare_sets(const torch::Tensor& a, const torch::Tensor& b, PairCategory category,
                           const PerceptualBackend& backend) {
    same_shape(a, b, "compare_sets");
    detail::require(a.dim() == 4 && a.size(0) >= 1, "compare_sets: expected (N,3,H,W) with N >= 1");
    torch::NoGradGuard ng;
    MetricsReport r;
    r.category = category;
    r.n_pairs = a.size(0);
    std::vector<torch::Tensor> ea, eb;
    for (int64_t i = 0; i < a.size(0); ++i) {
        auto x = a[i], y = b[i];
        r.ssim += ssim(x, y);
        r.psnr += psnr(x, y);
        r.lpips += backend.distance(x.unsqueeze(0), y.unsqueeze(0)).item<double>();
        ea.push_back(backend.embed(x.unsqueeze(0)));
        eb.push_back(backend.embed(y.unsqueeze(0)));
    }
    const auto n = static_cast<double>(r.n_pairs);
    r.ssim /= n;
    r.psnr /= n;
    r.lpips /= n;
    r.fid = r.n_pairs >= 2 ? fid(torch::cat(ea), torch::cat(eb)) : std::numeric_limits<double>::quiet_NaN();
    return r;
}

torch::Tensor encode_images(const ModelState& state, const torch::Tensor& hosts, const torch::Tensor& badge,
                            int64_t chunk) {
    torch::NoGradGuard ng;
    auto h = as_batch(hosts);
    auto features = pre_encode(as_batch(badge), state);
    std::vector<torch::Tensor> out;
    for (int64_t i = 0; i < h.size(0); i += chunk) {
        auto part = h.narrow(0, i, std::min(chunk, h.size(0) - i));
        auto f = features.size(0) == 1 ? features : features.narrow(0, i, part.size(0));
        out.push_back(apply_perturbation(part, encode(part, f, state)));
    }
    return torch::cat(out);
}

torch::Tensor decode_images(const ModelState& state, const torch::Tensor& images, int64_t chunk) {
    torch::NoGradGuard ng;
    auto x = as_batch(images);
    std::vector<torch::Tensor> out;
    for (int64_t i = 0; i < x.size(0); i += chunk) out.push_back(decode(x.narrow(0, i, std::min(chunk, x.size(0) - i)), state));
    return torch::cat(out);
}

MetricsReport control_clean_decode(const ModelState& state, const torch::Tensor& clean, const torch::Tensor& badge,
                                   const PerceptualBackend& backend) {
    auto decoded = decode_images(state, clean);
    auto target = as_batch(badge).expand_as(decoded);
    return compare_sets(decoded, target, PairCategory::clean_decode_vs_badge, backend);
}

torch::Tensor overlay_text(const torch::Tensor& images, const TextOverlay& overlay) {
    if (overlay.text.empty()) return images;
    detail::require(overlay.font_size > 0, "overlay_text: font_size must be positive");
    auto x = as_batch(images);
    const int h = static_cast<int>(x.size(2)), w = static_cast<int>(x.size(3));

    constexpr int font = cv::FONT_HERSHEY_SIMPLEX;
    const int thickness = std::max(1, overlay.font_size / 10);
    const double scale = cv::getFontScaleFromHeight(font, overlay.font_size, thickness);
    int baseline = 0;
    const cv::Size text = cv::getTextSize(overlay.text, font, scale, thickness, &baseline);
    // Outline adds one pixel on every side.
    const int rw = text.width + 2 + thickness, rh = text.height + baseline + 2 + thickness;
    detail::require(rw <= w && rh <= h, "overlay_text: text raster " + std::to_string(rw) + "x" +
                                            std::to_string(rh) + " does not fit a " + std::to_string(w) + "x" +
                                            std::to_string(h) + " image");

    cv::Mat outline(rh, rw, CV_8U, cv::Scalar(0)), fill(rh, rw, CV_8U, cv::Scalar(0));
    const cv::Point origin(1 + thickness / 2, 1 + thickness / 2 + text.height);
    cv::putText(fill, overlay.text, origin, font, scale, cv::Scalar(255), thickness, cv::LINE_8);
    cv::dilate(fill, outline, cv::getStructuringElement(cv::MORPH_RECT, {3, 3}));

    auto to_tensor = [](const cv::Mat& m) {
        return torch::from_blob(m.data, {m.rows, m.cols}, torch::kUInt8).to(torch::kFloat).div(255.0).clone();
    };
    auto fill_t = to_tensor(fill).to(x.scalar_type());
    auto ring_t = (to_tensor(outline).to(x.scalar_type()) - fill_t).clamp_min(0.0);

    auto rng = derive_rng(overlay.seed, {stream::overlay});
    std::uniform_int_distribution<int> px(0, w - rw), py(0, h - rh);
    auto out = x.clone();
    for (int64_t i = 0; i < out.size(0); ++i) {
        const int ox = px(rng), oy = py(rng);
        auto patch = out[i].narrow(1, oy, rh).narrow(2, ox, rw);
        patch.mul_(1.0 - ring_t - fill_t).add_(fill_t);  // black ring, white glyphs
    }
    return images.dim() == 3 ? out.squeeze(0) : out;
}

MetricsReport control_text_watermark(const ModelState& state, const torch::Tensor& encoded,
                                     const torch::Tensor& badge, const TextOverlay& overlay,
                                     const PerceptualBackend& backend) {
    auto stamped = overlay_text(as_batch(encoded), overlay);
    auto decoded = decode_images(state, stamped);
    auto target = as_batch(badge).expand_as(decoded);
    return compare_sets(decoded, target, PairCategory::textwm_decode_vs_badge, backend);
}

void write_reports(const std::vector<MetricsReport>& reports, const std::string& csv_path) {
    std::ofstream csv(csv_path);
    if (!csv) throw IoError("cannot write '" + csv_path + "'");
    csv << MetricsReport::csv_header() << '\n';
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : reports) {
        csv << r.csv_row() << '\n';
        j.push_back(r.to_json());
    }
    auto json_path = std::filesystem::path(csv_path).replace_extension(".json");
    std::ofstream js(json_path);
    if (!js) throw IoError("cannot write '" + json_path.string() + "'");
    js << nlohmann::json{{"reports", j}}.dump(2) << '\n';
}

}  // namespace cpmark
