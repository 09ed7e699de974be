// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 if any fails.
//
// Trains the desk preset twice (runs A and B, same seed) in CPMARK_WORK_DIR. Run A's
// final checkpoint is left in place for the desk_model test.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cpmark/distortions.hpp"
#include "cpmark/losses.hpp"
#include "cpmark/metrics.hpp"
#include "cpmark/models.hpp"
#include "cpmark/synth.hpp"
#include "cpmark/training.hpp"
#include "helpers.hpp"

namespace fs = std::filesystem;
using namespace cpmark;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;
std::set<std::string> reported;

void verdict(const std::string& name, bool pass, const std::string& detail) {
    reported.insert(name);
    std::printf("%s  %s  (%s)\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Runs `body`; an exception fails every listed criterion it did not get to report.
void guarded(const std::vector<std::string>& names, const std::function<void()>& body) {
    try {
        body();
    } catch (const std::exception& e) {
        for (const auto& name : names)
            if (!reported.count(name)) verdict(name, false, std::string("exception: ") + e.what());
    }
}

void diff_jpeg_fidelity() {
    const auto t0 = Clock::now();
    std::vector<torch::Tensor> imgs;
    for (uint64_t s = 0; s < 16; ++s) imgs.push_back(quantize_8bit(testing_support::random_image(64, 64, 1000 + s)));
    auto batch = torch::stack(imgs);
    double worst = 0;
    std::string per_q;
    for (int q : {25, 50, 75, 95}) {
        const double gap = (diff_jpeg(batch, q) - real_jpeg_roundtrip(batch, q)).abs().mean().item<double>();
        worst = std::max(worst, gap);
        per_q += fmt("q%.0f=%.4f ", q, gap);
    }
    const double t = seconds_since(t0);
    verdict("diff-JPEG fidelity", worst <= 0.03 && t < 60, per_q + fmt("limit 0.03, %.1fs", t));
}

void diff_jpeg_gradient() {
    const auto t0 = Clock::now();
    const int q = 50;
    auto img = testing_support::random_image(16, 16, 7, torch::kDouble).unsqueeze(0);
    auto x = img.clone().requires_grad_(true);
    auto w = testing_support::random_image(16, 16, 8, torch::kDouble).unsqueeze(0);
    auto objective = [&](const torch::Tensor& in) { return (diff_jpeg(in, q) * w).sum(); };
    objective(x).backward();
    auto grad = x.grad();
    const double h = 1e-6;
    std::mt19937_64 rng(5);
    double worst = 0;
    int used = 0;
    for (int tries = 0; used < 24 && tries < 500; ++tries) {
        const int64_t idx = static_cast<int64_t>(rng() % static_cast<uint64_t>(img.numel()));
        auto up = img.clone(), down = img.clone();
        up.view({-1})[idx] += h;
        down.view({-1})[idx] -= h;
        // Skip points whose perturbation straddles a rounding boundary.
        auto cu = jpeg::quantized_coefficients(up, q), cd = jpeg::quantized_coefficients(down, q);
        auto straddles = [](const torch::Tensor& a, const torch::Tensor& b) {
            return (torch::floor(a + 0.5) != torch::floor(b + 0.5)).any().item<bool>();
        };
        if (straddles(cu.luma, cd.luma) || straddles(cu.chroma, cd.chroma)) continue;
        const double fd = (objective(up).item<double>() - objective(down).item<double>()) / (2 * h);
        const double an = grad.view({-1})[idx].item<double>();
        worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(fd), 1e-8));
        ++used;
    }
    const double t = seconds_since(t0);
    verdict("diff-JPEG differentiability", used == 24 && worst <= 1e-2 && t < 60,
            fmt("max rel err %.2e over %.0f points, limit 1e-2, %.1fs", worst, used, t));
}

void stn_identity() {
    ModelConfig cfg;
    cfg.image_side = 128;
    cfg.base_channels = 8;
    cfg.depth = 3;
    auto state = init_state(cfg, 0);
    double worst = 0;
    torch::NoGradGuard ng;
    for (uint64_t s = 0; s < 8; ++s) {
        auto x = testing_support::random_image(128, 128, 200 + s).unsqueeze(0);
        worst = std::max(worst, (stn_transform(x, state) - x).abs().max().item<double>());
    }
    verdict("STN identity at initialization", worst <= 1e-5, fmt("max abs diff %.2e, limit 1e-5", worst));
}

void loss_gradient() {
    auto backend = PerceptualBackend::deterministic();
    backend.to(torch::kDouble);
    auto host = testing_support::random_image(32, 32, 1, torch::kDouble).unsqueeze(0);
    auto noise = testing_support::random_image(32, 32, 2, torch::kDouble).unsqueeze(0);
    auto enc = (host + 0.05 * (noise - 0.5)).clamp(0.01, 0.99);
    auto badge = testing_support::random_image(32, 32, 3, torch::kDouble).unsqueeze(0);
    auto dec = testing_support::random_image(32, 32, 4, torch::kDouble).unsqueeze(0);
    auto loss = [&](const torch::Tensor& e) { return total_loss(host, e, badge, dec, LossWeights{}, backend).total; };
    auto e = enc.clone().requires_grad_(true);
    loss(e).backward();
    auto grad = e.grad();
    std::mt19937_64 rng(11);
    const double h = 1e-6;
    double worst = 0;
    for (int k = 0; k < 32; ++k) {
        const int64_t idx = static_cast<int64_t>(rng() % static_cast<uint64_t>(enc.numel()));
        auto up = enc.clone(), down = enc.clone();
        up.view({-1})[idx] += h;
        down.view({-1})[idx] -= h;
        const double fd = (loss(up).item<double>() - loss(down).item<double>()) / (2 * h);
        const double an = grad.view({-1})[idx].item<double>();
        worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(fd), 1e-8));
    }
    verdict("loss gradient check", worst <= 1e-2, fmt("max rel err %.2e over 32 entries, limit 1e-2", worst));
}

void metric_oracles() {
    bool ok = true;
    std::string detail;
    // psnr closed forms
    auto g100 = torch::full({3, 16, 16}, 100.0 / 255.0, torch::kDouble);
    auto g101 = torch::full({3, 16, 16}, 101.0 / 255.0, torch::kDouble);
    const double p1 = psnr(g100, g101);
    auto cb = testing_support::checkerboard(16, 2);
    const double p0 = psnr(cb, 1 - cb);
    const double pc = psnr(cb, cb);
    ok = ok && std::abs(p1 - 20 * std::log10(255.0)) <= 1e-3 && std::abs(p0) <= 1e-3 && pc == kPsnrCap;
    detail += fmt("psnr %.4f/%.4f/%.1f; ", p1, p0, pc);
    // ssim against frozen scikit-image values (smooth pair on a 24x24 grid)
    auto x = torch::empty({3, 24, 24}, torch::kDouble), y = torch::empty({3, 24, 24}, torch::kDouble);
    auto xa = x.accessor<double, 3>(), ya = y.accessor<double, 3>();
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 24; ++i)
            for (int j = 0; j < 24; ++j) {
                xa[c][i][j] = 0.5 + 0.4 * std::sin(0.37 * i * (c + 1) + 0.23 * j);
                ya[c][i][j] = std::clamp(xa[c][i][j] + 0.1 * std::cos(0.51 * i - 0.19 * j * (c + 2)), 0.0, 1.0);
            }
    const double s = ssim(x, y);
    ok = ok && std::abs(s - 0.955700836390112) <= 1e-4;
    detail += fmt("ssim %.6f vs 0.955701; ", s);
    // fid
    torch::manual_seed(0);
    auto feats = torch::randn({64, 8}, torch::kDouble);
    const double faa = fid(feats, feats);
    GaussianStats a{Eigen::VectorXd::Constant(1, 0.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
    GaussianStats b{Eigen::VectorXd::Constant(1, 1.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
    const double f1 = fid(a, b);
    ok = ok && std::abs(faa) <= 1e-6 && f1 == 1.0;
    detail += fmt("fid(A,A) %.1e, 1-D %.6f", faa, f1);
    verdict("metric oracles", ok, detail);
}

void subjective() {
    SubjectiveResponses peak, neutral;
    for (int p = 0; p < 15; ++p) {
        peak.positive.push_back({5, 5, 5, 5});
        peak.negative.push_back({1, 1, 1, 1});
        neutral.positive.push_back({3, 3, 3, 3});
        neutral.negative.push_back({3, 3, 3, 3});
    }
    const double pk = subjective_score(peak), nt = subjective_score(neutral);
    verdict("S_sub peak and neutral", pk == 40.0 && nt == 24.0, fmt("peak %.4f, neutral %.4f", pk, nt));
}

struct DeskRun {
    fs::path checkpoint;
    double seconds = 0;
};

DeskRun train_desk(const fs::path& work, const fs::path& corpus, const std::string& name) {
    const fs::path config = fs::path(CPMARK_SOURCE_DIR) / "configs" / "desk.json";
    const fs::path out = work / name;
    fs::remove_all(out);
    auto cfg = load_train_config(config, {"data.corpus_root=\"" + corpus.string() + "\"",
                                          "data.badges=[\"" + (corpus / "badges" / "badge_0.png").string() + "\"]",
                                          "output_dir=\"" + out.string() + "\""});
    TrainOptions opts;
    opts.quiet = true;
    const auto t0 = Clock::now();
    auto result = train(cfg, corpus_for(cfg), badges_for(cfg), opts);
    return {result.checkpoint, seconds_since(t0)};
}

void desk_criteria(const fs::path& work) {
    const fs::path corpus = work / "desk_corpus";
    fs::remove_all(corpus);
    synth::CorpusSpec spec;  // 20 train / 8 test images at 128x128, one badge
    synth::write_corpus(corpus, spec);

    std::printf("training desk run A ...\n");
    std::fflush(stdout);
    auto run_a = train_desk(work, corpus, "run_a");
    std::printf("run A: %.0f s\n", run_a.seconds);

    auto ck = load_checkpoint(run_a.checkpoint);
    auto cfg = train_config_from_json(ck.extra.at("train_config"));
    auto backend = make_backend(cfg.perceptual);
    const int side = cfg.model.image_side;
    auto hosts = load_stack(list_images(corpus / "train"), side);
    auto badge = load_image(corpus / "badges" / "badge_0.png", side).data;

    // Desk end-to-end
    auto rows = read_metrics_csv(run_a.checkpoint.parent_path() / "metrics.csv");
    double early = 0;
    int n_early = 0;
    for (const auto& r : rows)
        if (r[0] >= 50 && r[0] <= 150) early += r[2], ++n_early;
    early /= std::max(n_early, 1);
    const double final_loss = rows.back()[2];
    auto encoded = quantize_8bit(encode_images(ck.state, hosts, badge));
    auto decoded = decode_images(ck.state, encoded);
    auto target = badge.unsqueeze(0).expand_as(decoded);
    const double dec_psnr = compare_sets(decoded, target, PairCategory::decoded_vs_badge, backend).psnr;
    const double enc_psnr = compare_sets(encoded, hosts, PairCategory::encoded_vs_host, backend).psnr;
    const bool ok_a = final_loss <= 0.5 * early, ok_b = dec_psnr >= 25.0, ok_c = enc_psnr >= 30.0;
    const bool ok_t = run_a.seconds <= 3 * 3600.0;
    verdict("desk-scale end-to-end", ok_a && ok_b && ok_c && ok_t,
            fmt("loss %.4f vs early avg %.4f; decoded PSNR %.2f dB; encoded PSNR %.2f dB", final_loss, early,
                dec_psnr, enc_psnr) +
                fmt("; %.0f s CPU", run_a.seconds));

    // Clean-decode control
    const double clean = control_clean_decode(ck.state, hosts, badge, backend).psnr;
    verdict("clean-decode control", clean <= dec_psnr - 10.0,
            fmt("clean %.2f dB vs encoded %.2f dB, gap %.2f (need >= 10)", clean, dec_psnr, dec_psnr - clean));

    // Blur-kernel insensitivity
    double lo = 1e9, hi = -1e9;
    std::string per_k;
    for (int k : {3, 5, 7, 9}) {
        auto blurred = quantize_8bit(gaussian_blur(encoded, k, blur_sigma_for_kernel(k)));
        const double s = compare_sets(decode_images(ck.state, blurred), target, PairCategory::decoded_vs_badge,
                                      backend).ssim;
        lo = std::min(lo, s);
        hi = std::max(hi, s);
        per_k += fmt("k%.0f=%.4f ", k, s);
    }
    verdict("blur-kernel insensitivity", hi - lo < 0.02, per_k + fmt("spread %.4f, limit 0.02", hi - lo));

    // Determinism
    std::printf("training desk run B ...\n");
    std::fflush(stdout);
    auto run_b = train_desk(work, corpus, "run_b");
    auto pa = ck.state.parameters(), pb = load_checkpoint(run_b.checkpoint).state.parameters();
    bool same = pa.size() == pb.size();
    double worst = 0;
    for (size_t i = 0; same && i < pa.size(); ++i) {
        if (pa[i].sizes() != pb[i].sizes()) {
            same = false;
            break;
        }
        worst = std::max(worst, (pa[i] - pb[i]).abs().max().item<double>());
    }
    verdict("determinism", same && worst == 0.0,
            same ? fmt("bitwise comparison, max abs diff %.1e, %.0f parameter tensors", worst, pa.size())
                 : std::string("parameter sets differ in shape"));
}

}  // namespace

int main() {
    torch::set_num_threads(1);
    const fs::path work = CPMARK_WORK_DIR;
    fs::create_directories(work);

    guarded({"diff-JPEG fidelity"}, diff_jpeg_fidelity);
    guarded({"diff-JPEG differentiability"}, diff_jpeg_gradient);
    guarded({"STN identity at initialization"}, stn_identity);
    guarded({"loss gradient check"}, loss_gradient);
    guarded({"metric oracles"}, metric_oracles);
    guarded({"S_sub peak and neutral"}, subjective);
    guarded({"desk-scale end-to-end", "clean-decode control", "blur-kernel insensitivity", "determinism"},
            [&] { desk_criteria(work); });

    std::printf("%d criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
