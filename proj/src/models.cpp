#include "cpmark/models.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <map>

#include "cpmark/archive.hpp"
#include "cpmark/errors.hpp"

namespace cpmark {
namespace {

namespace F = torch::nn::functional;

torch::Tensor as_batch(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

torch::Tensor like_input(const torch::Tensor& out, const torch::Tensor& in) {
    return in.dim() == 3 ? out.squeeze(0) : out;
}

void check_image(const torch::Tensor& x, const ModelConfig& cfg, const char* what) {
    detail::require(x.dim() == 4 && x.size(1) == 3,
                    std::string(what) + ": expected (3,H,W) or (N,3,H,W) RGB input");
    detail::require(x.size(2) == cfg.image_side && x.size(3) == cfg.image_side,
                    std::string(what) + ": image side " + std::to_string(x.size(2)) + "x" +
                        std::to_string(x.size(3)) + " does not match configured side " +
                        std::to_string(cfg.image_side));
}

torch::nn::Sequential double_conv(int in, int out, int groups) {
    return torch::nn::Sequential(ConvAct(in, out, groups), ConvAct(out, out, groups));
}

void copy_parameters(const CopyrightNet& from, CopyrightNet& to) {
    torch::NoGradGuard no_grad;
    auto src = from->named_parameters();
    for (auto& item : to->named_parameters()) item.value().copy_(src[item.key()]);
}

// Adam moments keyed by parameter name, so they survive a rebuild of the network.
struct AdamMoments {
    int64_t step = 0;
    torch::Tensor exp_avg;
    torch::Tensor exp_avg_sq;
};

std::map<std::string, AdamMoments> export_moments(const ModelState& state) {
    std::map<std::string, AdamMoments> out;
    if (!state.optimizer) return out;
    auto& table = state.optimizer->state();
    for (const auto& item : state.net->named_parameters()) {
        auto it = table.find(item.value().unsafeGetTensorImpl());
        if (it == table.end()) continue;
        auto& s = static_cast<torch::optim::AdamParamState&>(*it->second);
        out[item.key()] = {s.step(), s.exp_avg(), s.exp_avg_sq()};
    }
    return out;
}

void import_moments(ModelState& state, const std::map<std::string, AdamMoments>& moments) {
    auto& table = state.optimizer->state();
    for (const auto& item : state.net->named_parameters()) {
        auto it = moments.find(item.key());
        if (it == moments.end()) continue;
        auto s = std::make_unique<torch::optim::AdamParamState>();
        s->step(it->second.step);
        s->exp_avg(it->second.exp_avg.clone());
        s->exp_avg_sq(it->second.exp_avg_sq.clone());
        table[item.value().unsafeGetTensorImpl()] = std::move(s);
    }
}

double optimizer_lr(const torch::optim::Adam& opt) {
    return static_cast<const torch::optim::AdamOptions&>(opt.param_groups().front().options()).lr();
}

}  // namespace

void ModelConfig::validate() const {
    if (base_channels <= 0) throw ConfigError("base_channels must be positive", "model.base_channels");
    if (depth <= 0) throw ConfigError("depth must be positive", "model.depth");
    if (pre_encoder_layers != 5)
        throw ConfigError("the pre-encoder has exactly five layers", "model.pre_encoder_layers");
    if (stn_hidden <= 0) throw ConfigError("stn_hidden must be positive", "model.stn_hidden");
    if (image_side <= 0 || image_side % (1 << depth) != 0)
        throw ConfigError("image_side must be a positive multiple of 2^depth", "model.image_side");
    if (!(amplitude > 0.0)) throw ConfigError("amplitude must be positive", "model.amplitude");
    if (channel_doublings < -1) throw ConfigError("channel_doublings must be >= -1", "model.channel_doublings");
    if (norm_groups < 0 || (norm_groups > 0 && base_channels % norm_groups != 0))
        throw ConfigError("norm_groups must divide base_channels (or be 0)", "model.norm_groups");
}

int ModelConfig::channels_at(int level) const {
    const int doublings = channel_doublings < 0 ? level : std::min(level, channel_doublings);
    return base_channels << doublings;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"base_channels", c.base_channels},   {"depth", c.depth},
         {"pre_encoder_layers", c.pre_encoder_layers}, {"stn_hidden", c.stn_hidden},
         {"image_side", c.image_side},         {"amplitude", c.amplitude},
         {"channel_doublings", c.channel_doublings}, {"norm_groups", c.norm_groups}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.base_channels = j.value("base_channels", d.base_channels);
    c.depth = j.value("depth", d.depth);
    c.pre_encoder_layers = j.value("pre_encoder_layers", d.pre_encoder_layers);
    c.stn_hidden = j.value("stn_hidden", d.stn_hidden);
    c.image_side = j.value("image_side", d.image_side);
    c.amplitude = j.value("amplitude", d.amplitude);
    c.channel_doublings = j.value("channel_doublings", d.channel_doublings);
    c.norm_groups = j.value("norm_groups", d.norm_groups);
}

ConvActImpl::ConvActImpl(int in, int out, int norm_groups)
    : conv(register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)))) {
    if (norm_groups > 0) norm = register_module("norm", torch::nn::GroupNorm(norm_groups, out));
}

torch::Tensor ConvActImpl::forward(const torch::Tensor& x) {
    auto y = conv(x);
    if (norm) y = norm(y);
    return F::leaky_relu(y, F::LeakyReLUFuncOptions().negative_slope(0.2));
}

PreEncoderImpl::PreEncoderImpl(int n, int channels, int norm_groups) {
    torch::nn::Sequential seq;
    for (int i = 0; i < n; ++i) seq->push_back(ConvAct(i == 0 ? 3 : channels, channels, norm_groups));
    layers = register_module("layers", seq);
}

torch::Tensor PreEncoderImpl::forward(const torch::Tensor& x) { return layers->forward(x); }

EncoderDecoderImpl::EncoderDecoderImpl(int in_channels, int out_channels, const ModelConfig& cfg) {
    torch::nn::ModuleList d, u;
    for (int level = 0; level <= cfg.depth; ++level)
        d->push_back(double_conv(level == 0 ? in_channels : cfg.channels_at(level - 1), cfg.channels_at(level),
                                cfg.norm_groups));
    for (int level = 0; level < cfg.depth; ++level)
        u->push_back(double_conv(cfg.channels_at(level + 1) + cfg.channels_at(level), cfg.channels_at(level),
                                cfg.norm_groups));
    down = register_module("down", d);
    up = register_module("up", u);
    head = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.channels_at(0), out_channels, 1)));
}

torch::Tensor EncoderDecoderImpl::forward(const torch::Tensor& input) {
    std::vector<torch::Tensor> skips;
    auto x = input;
    for (size_t level = 0; level < down->size(); ++level) {
        if (level > 0) x = F::max_pool2d(x, F::MaxPool2dFuncOptions(2));
        x = down->ptr<torch::nn::SequentialImpl>(level)->forward(x);
        skips.push_back(x);
    }
    for (size_t i = up->size(); i-- > 0;) {
        const auto& skip = skips[i];
        x = F::interpolate(x, F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{skip.size(2), skip.size(3)})
                                  .mode(torch::kBilinear)
                                  .align_corners(false));
        x = up->ptr<torch::nn::SequentialImpl>(i)->forward(torch::cat({x, skip}, 1));
    }
    return head(x);
}

SpatialTransformerImpl::SpatialTransformerImpl(int hidden) {
    using namespace torch::nn;
    features = register_module(
        "features", Sequential(Conv2d(Conv2dOptions(3, 8, 5).stride(2).padding(2)), ReLU(),
                               Conv2d(Conv2dOptions(8, 16, 3).stride(2).padding(1)), ReLU(),
                               Conv2d(Conv2dOptions(16, 32, 3).stride(2).padding(1)), ReLU(),
                               AdaptiveAvgPool2d(AdaptiveAvgPool2dOptions(4))));
    fc = register_module("fc", Linear(32 * 4 * 4, hidden));
    affine = register_module("affine", Linear(hidden, 6));
}

torch::Tensor SpatialTransformerImpl::theta(const torch::Tensor& x) {
    auto h = features->forward(x).flatten(1);
    return affine(torch::relu(fc(h))).view({-1, 2, 3});
}

torch::Tensor SpatialTransformerImpl::forward(const torch::Tensor& x) { return warp_affine(x, theta(x)); }

CopyrightNetImpl::CopyrightNetImpl(const ModelConfig& cfg) {
    cfg.validate();
    pre_encoder = register_module("pre_encoder", PreEncoder(cfg.pre_encoder_layers, cfg.base_channels, cfg.norm_groups));
    encoder = register_module("encoder", EncoderDecoder(3 + cfg.base_channels, 3, cfg));
    decoder = register_module("decoder", EncoderDecoder(3, 3, cfg));
    stn = register_module("stn", SpatialTransformer(cfg.stn_hidden));
}

ModelState ModelState::clone() const {
    ModelState copy;
    copy.config = config;
    copy.net = CopyrightNet(config);
    copy_parameters(net, copy.net);
    copy.step = step;
    if (optimizer) {
        ensure_optimizer(copy, optimizer_lr(*optimizer));
        import_moments(copy, export_moments(*this));
    }
    return copy;
}

ModelState init_state(const ModelConfig& config, uint64_t seed) {
    config.validate();
    ModelState state;
    state.config = config;
    state.net = CopyrightNet(config);

    // Same bounds as the torch defaults, drawn from a private generator so the
    // result depends only on `seed`.
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    torch::NoGradGuard no_grad;
    for (auto& item : state.net->named_parameters()) {
        auto& p = item.value();
        const auto& name = item.key();
        if (name.find("norm.") != std::string::npos) {
            // GroupNorm affine: start as the plain normalization.
            if (name.compare(name.size() - 6, 6, "weight") == 0) p.fill_(1.0);
            else p.zero_();
            continue;
        }
        const bool is_weight = name.size() >= 6 && name.compare(name.size() - 6, 6, "weight") == 0;
        int64_t fan_in = 1;
        if (is_weight) {
            fan_in = p[0].numel();
        } else {
            auto weight_name = name.substr(0, name.size() - 4) + "weight";
            fan_in = state.net->named_parameters()[weight_name][0].numel();
        }
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        p.uniform_(-bound, bound, gen);
    }

    // The localization head starts at the identity transform.
    state.net->stn->affine->weight.zero_();
    state.net->stn->affine->bias.copy_(torch::tensor({1.0f, 0.0f, 0.0f, 0.0f, 1.0f, 0.0f}));
    return state;
}

torch::Tensor pre_encode(const torch::Tensor& cp_image, const ModelState& state) {
    auto x = as_batch(cp_image);
    check_image(x, state.config, "pre_encode");
    return like_input(state.net->pre_encoder.ptr()->forward(x), cp_image);
}

torch::Tensor encode(const torch::Tensor& host, const torch::Tensor& cp_features, const ModelState& state) {
    auto h = as_batch(host);
    auto f = as_batch(cp_features);
    check_image(h, state.config, "encode");
    detail::require(f.dim() == 4 && f.size(1) == state.config.base_channels,
                    "encode: badge features must have base_channels channels");
    detail::require(f.size(2) == h.size(2) && f.size(3) == h.size(3),
                    "encode: badge features and host differ in size");
    if (f.size(0) == 1 && h.size(0) > 1) f = f.expand({h.size(0), -1, -1, -1});
    detail::require(f.size(0) == h.size(0), "encode: batch sizes differ");

    auto raw = state.net->encoder.ptr()->forward(torch::cat({h, f}, 1));
    return like_input(state.config.amplitude * torch::tanh(raw), host);
}

torch::Tensor apply_perturbation(const torch::Tensor& host, const torch::Tensor& delta) {
    detail::require(host.sizes() == delta.sizes(), "apply_perturbation: host and perturbation shapes differ");
    return (host + delta).clamp(0.0, 1.0);
}

torch::Tensor warp_affine(const torch::Tensor& img, const torch::Tensor& theta) {
    auto x = as_batch(img);
    auto t = theta.dim() == 2 ? theta.unsqueeze(0) : theta;
    detail::require(t.dim() == 3 && t.size(1) == 2 && t.size(2) == 3, "warp_affine: theta must be (N,2,3)");
    if (t.size(0) == 1 && x.size(0) > 1) t = t.expand({x.size(0), 2, 3});
    auto grid = F::affine_grid(t.to(x.scalar_type()), x.sizes(), /*align_corners=*/false);
    auto out = F::grid_sample(x, grid,
                              F::GridSampleFuncOptions()
                                  .mode(torch::kBilinear)
                                  .padding_mode(torch::kZeros)
                                  .align_corners(false));
    return like_input(out, img);
}

torch::Tensor stn_transform(const torch::Tensor& img, const ModelState& state) {
    auto x = as_batch(img);
    check_image(x, state.config, "stn_transform");
    return like_input(state.net->stn.ptr()->forward(x), img);
}

torch::Tensor decode(const torch::Tensor& cimg, const ModelState& state) {
    auto x = as_batch(cimg);
    check_image(x, state.config, "decode");
    auto aligned = state.net->stn.ptr()->forward(x);
    return like_input(torch::sigmoid(state.net->decoder.ptr()->forward(aligned)), cimg);
}

void ensure_optimizer(ModelState& state, double lr) {
    if (state.optimizer) return;
    state.optimizer = std::make_shared<torch::optim::Adam>(state.net->parameters(), torch::optim::AdamOptions(lr));
}

void save_checkpoint(const ModelState& state, const std::filesystem::path& path, const nlohmann::json& extra) {
    TensorArchive archive;
    archive.meta["kind"] = "model";
    archive.meta["config"] = state.config;
    archive.meta["step"] = state.step;
    archive.meta["extra"] = extra;
    for (const auto& item : state.net->named_parameters()) archive.put("params/" + item.key(), item.value());

    nlohmann::json adam_steps = nlohmann::json::object();
    for (const auto& [name, m] : export_moments(state)) {
        archive.put("adam/" + name + "/exp_avg", m.exp_avg);
        archive.put("adam/" + name + "/exp_avg_sq", m.exp_avg_sq);
        adam_steps[name] = m.step;
    }
    if (state.optimizer) {
        archive.meta["optimizer"] = {{"lr", optimizer_lr(*state.optimizer)}, {"steps", adam_steps}};
    }
    archive.write(path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    auto archive = TensorArchive::read(path);
    if (archive.meta.value("kind", "") != "model")
        throw FormatError("'" + path.string() + "' is not a model checkpoint");

    LoadedCheckpoint out;
    auto& state = out.state;
    state.config = archive.meta.at("config").get<ModelConfig>();
    state.net = CopyrightNet(state.config);
    state.step = archive.meta.at("step").get<int64_t>();
    out.extra = archive.meta.value("extra", nlohmann::json::object());

    {
        torch::NoGradGuard no_grad;
        for (auto& item : state.net->named_parameters()) {
            const auto& stored = archive.at("params/" + item.key());
            if (stored.sizes() != item.value().sizes())
                throw FormatError("checkpoint shape mismatch for '" + item.key() + "'");
            item.value().copy_(stored);
        }
    }

    if (archive.meta.contains("optimizer")) {
        const auto& opt = archive.meta.at("optimizer");
        ensure_optimizer(state, opt.at("lr").get<double>());
        std::map<std::string, AdamMoments> moments;
        for (const auto& [name, step] : opt.at("steps").items()) {
            moments[name] = {step.get<int64_t>(), archive.at("adam/" + name + "/exp_avg"),
                             archive.at("adam/" + name + "/exp_avg_sq")};
        }
        import_moments(state, moments);
    }
    return out;
}

}  // namespace cpmark
