#include "cpmark/synth.hpp"

#include <cstdio>
#include <random>

#include <opencv2/imgproc.hpp>

#include "cpmark/errors.hpp"
#include "cpmark/imaging.hpp"
#include "cpmark/rng.hpp"

namespace cpmark::synth {

torch::Tensor host_image(int index, int side, uint64_t seed) {
    detail::require(side >= 16, "host_image: side must be at least 16");
    auto rng = derive_rng(seed, {0x5e7ULL, static_cast<uint64_t>(index)});
    std::uniform_real_distribution<float> u01(0.0f, 1.0f);
    std::uniform_int_distribution<int> pos(0, side - 1), rad(side / 25 + 1, side / 3), col(0, 255);
    std::normal_distribution<float> noise(0.0f, 0.02f);

    cv::Mat coarse(4, 4, CV_32FC3);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) coarse.at<cv::Vec3f>(y, x) = {u01(rng), u01(rng), u01(rng)};
    cv::Mat base;
    cv::resize(coarse, base, {side, side}, 0, 0, cv::INTER_CUBIC);
    cv::Mat img;
    cv::min(cv::max(base, 0.0), 1.0, base);
    base.convertTo(img, CV_8UC3, 255.0);

    for (int k = 0; k < 6; ++k) {
        const cv::Point c(pos(rng), pos(rng));
        const cv::Size axes(rad(rng), rad(rng));
        const double angle = 180.0 * u01(rng);
        const cv::Scalar color(col(rng), col(rng), col(rng));
        cv::ellipse(img, c, axes, angle, 0, 360, color, cv::FILLED, cv::LINE_AA);
    }
    cv::Mat f;
    img.convertTo(f, CV_32FC3, 1.0 / 255.0);
    for (auto it = f.begin<cv::Vec3f>(); it != f.end<cv::Vec3f>(); ++it)
        for (int c = 0; c < 3; ++c) (*it)[c] += noise(rng);
    cv::GaussianBlur(f, f, {3, 3}, 0.7);
    cv::min(cv::max(f, 0.0), 1.0, f);
    cv::Mat out;
    f.convertTo(out, CV_8UC3, 255.0);
    return from_bgr8(out);
}

torch::Tensor badge_image(int side, const std::string& label, int variant) {
    detail::require(side >= 16, "badge_image: side must be at least 16");
    static const cv::Scalar rings[] = {{200, 60, 30}, {40, 150, 40}, {30, 30, 200}, {160, 40, 160},
                                       {20, 140, 200}, {120, 120, 20}, {90, 90, 90}};
    const cv::Scalar ring = rings[variant % 7];
    cv::Mat b(side, side, CV_8UC3, cv::Scalar(255, 255, 255));
    const int thickness = std::max(2, side / 21);
    cv::circle(b, {side / 2, side / 2}, side / 3, ring, thickness, cv::LINE_AA);
    if (!label.empty()) {
        const int font = cv::FONT_HERSHEY_SIMPLEX;
        const int t = std::max(1, side / 42);
        double scale = side / 100.0;
        int baseline = 0;
        cv::Size sz = cv::getTextSize(label, font, scale, t, &baseline);
        const double limit = side * 0.5;
        if (sz.width > limit) {
            scale *= limit / sz.width;
            sz = cv::getTextSize(label, font, scale, t, &baseline);
        }
        cv::putText(b, label, {(side - sz.width) / 2, (side + sz.height) / 2}, font, scale, cv::Scalar(20, 20, 20), t,
                    cv::LINE_AA);
    }
    return from_bgr8(b);
}

void write_corpus(const std::filesystem::path& root, const CorpusSpec& spec) {
    namespace fs = std::filesystem;
    detail::require(spec.train >= 0 && spec.test >= 0 && spec.badges >= 1, "write_corpus: bad counts");
    const std::pair<const char*, int> splits[] = {{"train", spec.train}, {"test", spec.test}};
    int index = 0;
    for (const auto& [name, count] : splits) {
        fs::create_directories(root / name);
        for (int i = 0; i < count; ++i, ++index) {
            char file[32];
            std::snprintf(file, sizeof file, "img_%04d.png", i);
            save_image({host_image(index, spec.side, spec.seed)}, root / name / file, true);
        }
    }
    fs::create_directories(root / "badges");
    for (int k = 0; k < spec.badges; ++k) {
        const std::string label = spec.badges == 1 ? "CP" : "CP" + std::to_string(k + 1);
        save_image({badge_image(spec.side, label, k)}, root / "badges" / ("badge_" + std::to_string(k) + ".png"), true);
    }
}

}  // namespace cpmark::synth
