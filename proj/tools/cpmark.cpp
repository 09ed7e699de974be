// cpmark: train / encode / decode / eval / sweep

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cpmark/dataset.hpp"
#include "cpmark/distortions.hpp"
#include "cpmark/errors.hpp"
#include "cpmark/imaging.hpp"
#include "cpmark/metrics.hpp"
#include "cpmark/models.hpp"
#include "cpmark/training.hpp"

namespace fs = std::filesystem;
using namespace cpmark;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kDiverged = 3;

struct Args {
    std::string config, checkpoint, in, out, report, resume;
    std::vector<std::string> badges, overrides;
    std::optional<uint64_t> seed;
    bool controls = false;
    std::string text = "ACM MM 2023";
    int font_size = 18;
};

struct Checkpoint {
    ModelState state;
    nlohmann::json extra;
};

Checkpoint open_checkpoint(const std::string& path) {
    if (path.empty()) throw ConfigError("--checkpoint is required");
    auto loaded = load_checkpoint(path);
    return {std::move(loaded.state), std::move(loaded.extra)};
}

PerceptualBackend backend_of(const Checkpoint& ck) {
    PerceptualConfig p;
    if (ck.extra.contains("train_config")) {
        auto cfg = train_config_from_json(ck.extra["train_config"]);
        p = cfg.perceptual;
    }
    return make_backend(p);
}

std::vector<fs::path> badge_paths(const Args& a, const Checkpoint& ck) {
    std::vector<fs::path> out(a.badges.begin(), a.badges.end());
    if (out.empty() && ck.extra.contains("badge_paths"))
        for (const auto& p : ck.extra["badge_paths"]) out.emplace_back(p.get<std::string>());
    if (out.empty()) throw ConfigError("no badge given and the checkpoint does not name one (use --badge)");
    return out;
}

void warn_unknown_badge(const torch::Tensor& badge, const Checkpoint& ck, const std::string& name) {
    if (!ck.extra.contains("badge_fingerprints")) return;
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(badge_fingerprint(badge)));
    for (const auto& f : ck.extra["badge_fingerprints"])
        if (f.get<std::string>() == hex) return;
    std::cerr << "warning: badge '" << name << "' is not one this checkpoint was trained with; proceeding\n";
}

fs::path corpus_dir(const std::string& in) {
    if (in.empty()) throw ConfigError("--in is required");
    fs::path root = in;
    if (fs::is_directory(root / "test")) return root / "test";
    return root;
}

bool has_png_extension(const fs::path& p) {
    auto ext = p.extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return ext == ".png";
}

int cmd_train(const Args& a) {
    auto overrides = a.overrides;
    if (a.seed) overrides.push_back("seed=" + std::to_string(*a.seed));
    if (!a.out.empty()) overrides.push_back("output_dir=\"" + a.out + "\"");
    auto cfg = load_train_config(a.config, overrides);
    auto corpus = corpus_for(cfg);
    auto badges = badges_for(cfg);
    TrainOptions opts;
    if (!a.resume.empty()) opts.resume_from = fs::path(a.resume);
    auto result = train(cfg, corpus, badges, opts);
    std::cout << result.checkpoint.string() << "\n";
    return kOk;
}

int cmd_encode(const Args& a) {
    if (a.out.empty() || a.in.empty() || a.badges.size() != 1)
        throw ConfigError("encode needs --in, exactly one --badge, and --out");
    if (!has_png_extension(a.out))
        throw ConfigError("encoded images are stored losslessly; --out must end in .png");
    auto ck = open_checkpoint(a.checkpoint);
    const int side = ck.state.config.image_side;
    auto host = load_image(a.in, side).data;
    auto badge = load_image(a.badges.front(), side).data;
    warn_unknown_badge(badge, ck, a.badges.front());
    auto encoded = quantize_8bit(encode_images(ck.state, host, badge)[0]);
    save_image({encoded}, a.out, /*lossless=*/true);
    std::printf("psnr %.4f\n", psnr(host, encoded));
    return kOk;
}

int cmd_decode(const Args& a) {
    if (a.out.empty() || a.in.empty()) throw ConfigError("decode needs --in and --out");
    auto ck = open_checkpoint(a.checkpoint);
    auto img = load_image(a.in, ck.state.config.image_side).data;
    auto decoded = decode_images(ck.state, img)[0];
    save_image({decoded}, a.out, /*lossless=*/true);
    return kOk;
}

struct EvalInputs {
    Checkpoint ck;
    PerceptualBackend backend;
    torch::Tensor hosts;
    std::vector<std::pair<std::string, torch::Tensor>> badges;
};

EvalInputs eval_inputs(const Args& a) {
    if (a.report.empty()) throw ConfigError("--report is required");
    auto ck = open_checkpoint(a.checkpoint);
    const int side = ck.state.config.image_side;
    auto paths = list_images(corpus_dir(a.in));
    EvalInputs in{std::move(ck), PerceptualBackend::identity(), load_stack(paths, side), {}};
    in.backend = backend_of(in.ck);
    for (const auto& p : badge_paths(a, in.ck)) {
        auto b = load_image(p, side).data;
        warn_unknown_badge(b, in.ck, p.string());
        in.badges.emplace_back(p.stem().string(), b);
    }
    return in;
}

int cmd_eval(const Args& a) {
    auto in = eval_inputs(a);
    std::vector<MetricsReport> reports;
    for (const auto& [label, badge] : in.badges) {
        auto encoded = quantize_8bit(encode_images(in.ck.state, in.hosts, badge));
        auto decoded = decode_images(in.ck.state, encoded);
        auto target = badge.unsqueeze(0).expand_as(decoded);
        reports.push_back(compare_sets(encoded, in.hosts, PairCategory::encoded_vs_host, in.backend));
        reports.push_back(compare_sets(decoded, target, PairCategory::decoded_vs_badge, in.backend));
        if (a.controls) {
            reports.push_back(control_clean_decode(in.ck.state, in.hosts, badge, in.backend));
            TextOverlay overlay{a.text, a.font_size, a.seed.value_or(0)};
            reports.push_back(control_text_watermark(in.ck.state, encoded, badge, overlay, in.backend));
        }
        for (auto it = reports.end() - (a.controls ? 4 : 2); it != reports.end(); ++it) it->label = label;
    }
    write_reports(reports, a.report);
    for (const auto& r : reports) std::cout << r.csv_row() << "\n";
    return kOk;
}

int cmd_sweep(const Args& a) {
    auto in = eval_inputs(a);
    std::vector<std::string> rows{"label,distortion,param,ssim,psnr,lpips,fid,n_pairs"};
    nlohmann::json js = nlohmann::json::array();
    auto add = [&](const std::string& label, const char* kind, int param, const MetricsReport& r) {
        char buf[512];
        std::snprintf(buf, sizeof buf, "%s,%s,%d,%.6f,%.4f,%.6f,%.6f,%lld", label.c_str(), kind, param, r.ssim, r.psnr,
                      r.lpips, r.fid, static_cast<long long>(r.n_pairs));
        rows.emplace_back(buf);
        auto j = r.to_json();
        j["label"] = label;
        j["distortion"] = kind;
        j["param"] = param;
        js.push_back(j);
    };
    for (const auto& [label, badge] : in.badges) {
        auto encoded = quantize_8bit(encode_images(in.ck.state, in.hosts, badge));
        auto target = badge.unsqueeze(0).expand_as(encoded);
        std::vector<int> qualities{25, 35, 45, 55, 65, 75, 85, 95, 100};
        for (int q : qualities) {
            auto decoded = decode_images(in.ck.state, real_jpeg_roundtrip(encoded, q));
            add(label, "jpeg", q, compare_sets(decoded, target, PairCategory::decoded_vs_badge, in.backend));
        }
        for (int k : {3, 5, 7, 9}) {
            auto blurred = quantize_8bit(gaussian_blur(encoded, k, blur_sigma_for_kernel(k)));
            auto decoded = decode_images(in.ck.state, blurred);
            add(label, "gaussian_blur", k, compare_sets(decoded, target, PairCategory::decoded_vs_badge, in.backend));
        }
    }
    std::ofstream csv(a.report);
    if (!csv) throw IoError("cannot write '" + a.report + "'");
    for (const auto& r : rows) csv << r << "\n";
    std::ofstream(fs::path(a.report).replace_extension(".json")) << nlohmann::json{{"sweep", js}}.dump(2) << "\n";
    for (size_t i = 1; i < rows.size(); ++i) std::cout << rows[i] << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Copyright badge embedding: train, encode, decode, eval, sweep"};
    app.require_subcommand(1);
    Args a;

    auto add_common = [&](CLI::App* s) {
        s->add_option("--checkpoint", a.checkpoint, "Model checkpoint");
        s->add_option("--in", a.in, "Input image or corpus directory");
        s->add_option("--badge", a.badges, "Badge image (repeatable)");
        s->add_option("--out", a.out, "Output path");
        s->add_option("--report", a.report, "Report CSV (a JSON twin is written next to it)");
        s->add_option("--seed", a.seed, "Seed");
    };

    auto* train_cmd = app.add_subcommand("train", "Train encoder and decoder");
    train_cmd->add_option("--config", a.config, "JSON config")->required();
    train_cmd->add_option("--set", a.overrides, "Override key=value (repeatable)");
    train_cmd->add_option("--resume", a.resume, "Resume from checkpoint");
    train_cmd->add_option("--out", a.out, "Output directory (overrides output_dir)");
    train_cmd->add_option("--seed", a.seed, "Seed (overrides seed)");

    auto* encode_cmd = app.add_subcommand("encode", "Embed a badge into a host image");
    auto* decode_cmd = app.add_subcommand("decode", "Recover the badge from an image");
    auto* eval_cmd = app.add_subcommand("eval", "Image-quality report on a corpus");
    auto* sweep_cmd = app.add_subcommand("sweep", "Decode after real JPEG and blur at several strengths");
    for (auto* s : {encode_cmd, decode_cmd, eval_cmd, sweep_cmd}) add_common(s);
    eval_cmd->add_flag("--controls", a.controls, "Also run the clean-decode and text-overlay controls");
    eval_cmd->add_option("--text", a.text, "Overlay text for the text control");
    eval_cmd->add_option("--font-size", a.font_size, "Overlay cap height in pixels");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*train_cmd) return cmd_train(a);
        if (*encode_cmd) return cmd_encode(a);
        if (*decode_cmd) return cmd_decode(a);
        if (*eval_cmd) return cmd_eval(a);
        if (*sweep_cmd) return cmd_sweep(a);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what();
        if (!e.key().empty()) std::cerr << " [key: " << e.key() << "]";
        std::cerr << "\n";
        return kUsage;
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << " (term " << e.term() << ")\n";
        return kDiverged;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kUsage;
}
