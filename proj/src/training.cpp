#include "cpmark/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cpmark/errors.hpp"
#include "cpmark/rng.hpp"

namespace cpmark {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json robustness_to_json(const RobustnessConfig& r) {
    return {{"kind_probabilities", r.kind_probabilities},
            {"quality_min", r.quality_min},
            {"quality_max", r.quality_max},
            {"blur_kernels", r.blur_kernels},
            {"brightness", r.brightness},
            {"contrast", r.contrast},
            {"saturation", r.saturation},
            {"hue", r.hue}};
}

// Every key of `j` must also exist in `schema`, recursively through objects.
void check_known_keys(const json& j, const json& schema, const std::string& prefix) {
    if (!j.is_object()) return;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + key + "'", key);
        const auto& sub = schema.at(it.key());
        if (sub.is_object()) {
            if (!it.value().is_object()) throw ConfigError("config key '" + key + "' must be an object", key);
            check_known_keys(it.value(), sub, key);
        }
    }
}

template <typename T>
void read(const json& j, const char* name, const std::string& prefix, T& out) {
    if (!j.contains(name)) return;
    try {
        out = j.at(name).get<T>();
    } catch (const json::exception& e) {
        const std::string key = prefix.empty() ? name : prefix + "." + name;
        throw ConfigError("bad value for '" + key + "': " + e.what(), key);
    }
}

template <typename T>
void read_optional(const json& j, const char* name, std::optional<T>& out) {
    if (!j.contains(name)) return;
    if (j.at(name).is_null()) {
        out.reset();
        return;
    }
    T v{};
    read(j, name, "", v);
    out = v;
}

std::string fingerprint_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace

int64_t TrainConfig::effective_warmup() const {
    return warmup_steps ? *warmup_steps : total_steps / 20;
}

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive", "lr");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1", "batch_size");
    if (total_steps < 0) throw ConfigError("total_steps must be non-negative", "total_steps");
    if (warmup_steps && (*warmup_steps < 0 || *warmup_steps > total_steps))
        throw ConfigError("warmup_steps must lie in [0, total_steps]", "warmup_steps");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be positive", "checkpoint_every");
    if (hard_epsilon && !(*hard_epsilon >= 0.0)) throw ConfigError("hard_epsilon must be non-negative", "hard_epsilon");
    if (log_every < 1) throw ConfigError("log_every must be positive", "log_every");
    if (weights.lambda1 < 0.0) throw ConfigError("lambda1 must be non-negative", "weights.lambda1");
    if (weights.lambda2 < 0.0) throw ConfigError("lambda2 must be non-negative", "weights.lambda2");
    robustness.validate();
    model.validate();
    split_from_string(data.split);
    badge_mode_from_string(data.badge_mode);
    if (perceptual.backend != "random" && perceptual.backend != "vgg16" && perceptual.backend != "identity")
        throw ConfigError("perceptual.backend must be random, vgg16 or identity", "perceptual.backend");
    if (perceptual.width < 1) throw ConfigError("perceptual.width must be positive", "perceptual.width");
}

json to_json(const TrainConfig& c) {
    json model;
    to_json(model, c.model);
    return {{"lr", c.lr},
            {"batch_size", c.batch_size},
            {"total_steps", c.total_steps},
            {"warmup_steps", c.warmup_steps ? json(*c.warmup_steps) : json(nullptr)},
            {"weights", {{"lambda1", c.weights.lambda1}, {"lambda2", c.weights.lambda2}}},
            {"robustness", robustness_to_json(c.robustness)},
            {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every},
            {"hard_epsilon", c.hard_epsilon ? json(*c.hard_epsilon) : json(nullptr)},
            {"log_every", c.log_every},
            {"model", model},
            {"data",
             {{"corpus_root", c.data.corpus_root},
              {"split", c.data.split},
              {"badges", c.data.badges},
              {"badge_mode", c.data.badge_mode}}},
            {"perceptual",
             {{"backend", c.perceptual.backend},
              {"weights", c.perceptual.weights},
              {"width", c.perceptual.width},
              {"seed", c.perceptual.seed}}},
            {"output_dir", c.output_dir}};
}

TrainConfig train_config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    check_known_keys(j, to_json(TrainConfig{}), "");

    TrainConfig c;
    read(j, "lr", "", c.lr);
    read(j, "batch_size", "", c.batch_size);
    read(j, "total_steps", "", c.total_steps);
    read_optional(j, "warmup_steps", c.warmup_steps);
    read(j, "seed", "", c.seed);
    read(j, "checkpoint_every", "", c.checkpoint_every);
    read_optional(j, "hard_epsilon", c.hard_epsilon);
    read(j, "log_every", "", c.log_every);
    read(j, "output_dir", "", c.output_dir);
    if (j.contains("weights")) {
        const auto& w = j.at("weights");
        read(w, "lambda1", "weights", c.weights.lambda1);
        read(w, "lambda2", "weights", c.weights.lambda2);
    }
    if (j.contains("robustness")) {
        const auto& r = j.at("robustness");
        auto& o = c.robustness;
        read(r, "kind_probabilities", "robustness", o.kind_probabilities);
        read(r, "quality_min", "robustness", o.quality_min);
        read(r, "quality_max", "robustness", o.quality_max);
        read(r, "blur_kernels", "robustness", o.blur_kernels);
        read(r, "brightness", "robustness", o.brightness);
        read(r, "contrast", "robustness", o.contrast);
        read(r, "saturation", "robustness", o.saturation);
        read(r, "hue", "robustness", o.hue);
    }
    if (j.contains("model")) {
        try {
            json merged;
            to_json(merged, c.model);
            merged.update(j.at("model"));
            from_json(merged, c.model);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad value under 'model': ") + e.what(), "model");
        }
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        read(d, "corpus_root", "data", c.data.corpus_root);
        read(d, "split", "data", c.data.split);
        read(d, "badges", "data", c.data.badges);
        read(d, "badge_mode", "data", c.data.badge_mode);
    }
    if (j.contains("perceptual")) {
        const auto& p = j.at("perceptual");
        read(p, "backend", "perceptual", c.perceptual.backend);
        read(p, "weights", "perceptual", c.perceptual.weights);
        read(p, "width", "perceptual", c.perceptual.width);
        read(p, "seed", "perceptual", c.perceptual.seed);
    }
    c.validate();
    return c;
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override '" + assignment + "' is not of the form key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);

    json value = json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (value.is_discarded()) value = text;

    const json schema = to_json(TrainConfig{});
    const json* s = &schema;
    json* node = &j;
    std::stringstream parts(key);
    std::string part;
    std::vector<std::string> path;
    while (std::getline(parts, part, '.')) path.push_back(part);
    for (size_t i = 0; i < path.size(); ++i) {
        if (!s->is_object() || !s->contains(path[i])) throw ConfigError("unknown config key '" + key + "'", key);
        s = &s->at(path[i]);
        if (i + 1 < path.size()) {
            if (!node->contains(path[i]) || !(*node)[path[i]].is_object()) (*node)[path[i]] = json::object();
            node = &(*node)[path[i]];
        }
    }
    if (s->is_object()) throw ConfigError("config key '" + key + "' is a section, not a value", key);
    (*node)[path.back()] = value;
}

TrainConfig load_train_config(const fs::path& path, const std::vector<std::string>& overrides) {
    json j = json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot read config '" + path.string() + "'");
        j = json::parse(in, nullptr, /*allow_exceptions=*/false, /*ignore_comments=*/true);
        if (j.is_discarded()) throw ConfigError("config '" + path.string() + "' is not valid JSON");
        // Relative data paths are taken relative to the config file.
        if (j.contains("data") && j["data"].is_object()) {
            const auto base = path.parent_path();
            auto& d = j["data"];
            if (d.contains("corpus_root") && d["corpus_root"].is_string()) {
                fs::path p = d["corpus_root"].get<std::string>();
                if (p.is_relative() && !p.empty()) d["corpus_root"] = (base / p).lexically_normal().string();
            }
            if (d.contains("badges") && d["badges"].is_array()) {
                for (auto& b : d["badges"]) {
                    if (!b.is_string()) continue;
                    fs::path p = b.get<std::string>();
                    if (p.is_relative()) b = (base / p).lexically_normal().string();
                }
            }
        }
    }
    for (const auto& o : overrides) apply_override(j, o);
    return train_config_from_json(j);
}

double lr_schedule(int64_t step, const TrainConfig& cfg) {
    detail::require(step >= 0 && step <= cfg.total_steps, "lr_schedule: step outside [0, total_steps]");
    const int64_t w = cfg.effective_warmup();
    if (w == 0 || step >= w) return cfg.lr;
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(w);
}

PerceptualBackend make_backend(const PerceptualConfig& cfg) {
    if (cfg.backend == "identity") return PerceptualBackend::identity();
    if (cfg.backend == "vgg16") return PerceptualBackend::from_weights_path(cfg.weights);
    if (cfg.backend == "random") return PerceptualBackend::deterministic(cfg.seed, cfg.width);
    throw ConfigError("unknown perceptual backend '" + cfg.backend + "'", "perceptual.backend");
}

LossBreakdown train_step(const Batch& batch, ModelState& state, const TrainConfig& cfg,
                         const PerceptualBackend& backend, std::mt19937_64& rng, StepTrace* trace) {
    detail::require(state.step < cfg.total_steps, "train_step: already at total_steps");
    detail::require(batch.hosts.defined() && batch.hosts.dim() == 4, "train_step: hosts must be (B,3,H,W)");
    ensure_optimizer(state, cfg.lr);
    const double lr = lr_schedule(state.step, cfg);
    for (auto& group : state.optimizer->param_groups())
        static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);

    // Badge features once per distinct badge, then gathered per sample.
    auto ids = batch.badge_ids.defined() ? batch.badge_ids
                                         : torch::zeros({batch.hosts.size(0)}, torch::kInt64);
    auto [unique_ids, inverse] = torch::_unique(ids, /*sorted=*/true, /*return_inverse=*/true);
    std::vector<torch::Tensor> firsts;
    for (int64_t u = 0; u < unique_ids.size(0); ++u) {
        auto where = torch::nonzero(ids == unique_ids[u]).flatten();
        firsts.push_back(batch.badges[where[0].item<int64_t>()]);
    }
    auto features = pre_encode(torch::stack(firsts), state).index_select(0, inverse);

    auto delta = encode(batch.hosts, features, state);
    if (cfg.hard_epsilon) delta = delta.clamp(-*cfg.hard_epsilon, *cfg.hard_epsilon);
    auto encoded = apply_perturbation(batch.hosts, delta);

    std::vector<DistortionSpec> specs;
    std::vector<torch::Tensor> distorted_parts;
    for (int64_t i = 0; i < encoded.size(0); ++i) {
        specs.push_back(sample_transform(rng, cfg.robustness));
        distorted_parts.push_back(apply(specs.back(), encoded.narrow(0, i, 1)));
    }
    auto distorted = torch::cat(distorted_parts, 0);
    auto decoded = decode(distorted, state);
    auto loss = total_loss(batch.hosts, encoded, batch.badges, decoded, cfg.weights, backend);

    if (trace) {
        trace->delta = delta.detach();
        trace->encoded = encoded.detach();
        trace->distorted = distorted.detach();
        trace->decoded = decoded.detach();
        trace->specs = specs;
        trace->lr = lr;
    }

    const std::pair<const char*, const torch::Tensor*> terms[] = {
        {"loss_enc", &loss.enc}, {"loss_dec", &loss.dec}, {"loss_yuv", &loss.yuv}, {"loss_total", &loss.total}};
    for (const auto& [name, t] : terms) {
        const double v = t->item<double>();
        if (!std::isfinite(v)) {
            std::ostringstream msg;
            msg << "training diverged at step " << state.step << ": " << name << " = " << v;
            throw DivergenceError(msg.str(), name, state.step);
        }
    }

    state.optimizer->zero_grad();
    loss.total.backward();
    state.optimizer->step();
    ++state.step;

    return {loss.total.detach(), loss.enc.detach(), loss.dec.detach(), loss.yuv.detach()};
}

Corpus corpus_for(const TrainConfig& cfg) {
    if (cfg.data.corpus_root.empty()) throw ConfigError("data.corpus_root is not set", "data.corpus_root");
    return scan_corpus(cfg.data.corpus_root, split_from_string(cfg.data.split));
}

BadgeSet badges_for(const TrainConfig& cfg) {
    if (cfg.data.badges.empty()) throw ConfigError("data.badges is empty", "data.badges");
    std::vector<fs::path> paths(cfg.data.badges.begin(), cfg.data.badges.end());
    try {
        return BadgeSet::load(paths, cfg.model.image_side, badge_mode_from_string(cfg.data.badge_mode));
    } catch (const ContractViolation& e) {
        throw ConfigError(e.what(), "data.badges");
    }
}

namespace {

class MetricsLog {
public:
    MetricsLog(const fs::path& path, int64_t start_step) : path_(path) {
        std::vector<std::string> kept;
        if (start_step > 0 && fs::exists(path)) {
            std::ifstream in(path);
            std::string line;
            std::getline(in, line);  // header
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                if (std::stoll(line.substr(0, line.find(','))) < start_step) kept.push_back(line);
            }
        }
        out_.open(path, std::ios::trunc);
        if (!out_) throw IoError("cannot write '" + path.string() + "'");
        out_ << "step,lr,loss_total,loss_enc,loss_dec,loss_yuv\n";
        for (const auto& l : kept) out_ << l << '\n';
        out_.flush();
    }

    void write(int64_t step, double lr, const LossBreakdown& l) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(step), lr,
                      l.total.item<double>(), l.enc.item<double>(), l.dec.item<double>(), l.yuv.item<double>());
        out_ << buf;
        out_.flush();
    }

private:
    fs::path path_;
    std::ofstream out_;
};

}  // namespace

TrainResult train(const TrainConfig& cfg, const Corpus& corpus, const BadgeSet& badges, const TrainOptions& opts) {
    cfg.validate();
    const fs::path out_dir = cfg.output_dir;
    fs::create_directories(out_dir);
    const auto backend = make_backend(cfg.perceptual);

    ModelState state;
    if (opts.resume_from) {
        state = load_checkpoint(*opts.resume_from).state;
        if (state.config.image_side != cfg.model.image_side || state.config.base_channels != cfg.model.base_channels)
            throw ConfigError("checkpoint model does not match the config", "model");
    } else {
        state = init_state(cfg.model, cfg.seed);
    }
    ensure_optimizer(state, cfg.lr);

    json extra = {{"train_config", to_json(cfg)}, {"badge_mode", to_string(badges.mode)}};
    json prints = json::array();
    for (const auto& b : badges.badges) prints.push_back(fingerprint_hex(badge_fingerprint(b.data)));
    extra["badge_fingerprints"] = prints;
    json badge_paths = json::array();
    for (const auto& p : badges.paths) badge_paths.push_back(fs::absolute(p).string());
    extra["badge_paths"] = badge_paths;

    TrainResult result;
    result.metrics_csv = out_dir / "metrics.csv";
    MetricsLog log(result.metrics_csv, state.step);

    BatchStream stream(corpus, badges, cfg.batch_size, cfg.model.image_side, cfg.seed);
    stream.seek(state.step);

    const int64_t end = opts.stop_after ? std::min(*opts.stop_after, cfg.total_steps) : cfg.total_steps;
    const int64_t start = state.step;
    while (state.step < end) {
        const int64_t step = state.step;
        auto rng = derive_rng(cfg.seed, {stream::distortion, static_cast<uint64_t>(step)});
        auto batch = stream.next();
        LossBreakdown loss;
        try {
            loss = train_step(batch, state, cfg, backend, rng);
        } catch (const DivergenceError& e) {
            auto diverged = extra;
            diverged["diverged"] = {{"term", e.term()}, {"step", e.step()}};
            save_checkpoint(state, out_dir / "diverged.ckpt", diverged);
            throw;
        }
        log.write(step, lr_schedule(step, cfg), loss);
        if (state.step % cfg.checkpoint_every == 0 && state.step < cfg.total_steps) {
            char name[64];
            std::snprintf(name, sizeof name, "step_%08lld.ckpt", static_cast<long long>(state.step));
            save_checkpoint(state, out_dir / name, extra);
        }
        if (!opts.quiet && (step % cfg.log_every == 0 || state.step == end)) {
            std::fprintf(stderr, "step %lld/%lld lr %.3g loss %.5f (enc %.5f dec %.5f yuv %.5f)\n",
                         static_cast<long long>(step), static_cast<long long>(cfg.total_steps),
                         lr_schedule(step, cfg), loss.total.item<double>(), loss.enc.item<double>(),
                         loss.dec.item<double>(), loss.yuv.item<double>());
        }
    }
    result.steps_run = state.step - start;

    if (state.step >= cfg.total_steps) {
        result.checkpoint = out_dir / "final.ckpt";
    } else {
        char name[64];
        std::snprintf(name, sizeof name, "step_%08lld.ckpt", static_cast<long long>(state.step));
        result.checkpoint = out_dir / name;
    }
    save_checkpoint(state, result.checkpoint, extra);
    return result;
}

std::vector<std::vector<double>> read_metrics_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    std::vector<std::vector<double>> rows;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace cpmark
