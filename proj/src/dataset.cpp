#include "cpmark/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>

#include "cpmark/errors.hpp"
#include "cpmark/rng.hpp"

namespace cpmark {
namespace fs = std::filesystem;

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }
std::string to_string(BadgeMode m) { return m == BadgeMode::single ? "single" : "multi"; }

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split '" + s + "' (expected train or test)", "data.split");
}

BadgeMode badge_mode_from_string(const std::string& s) {
    if (s == "single") return BadgeMode::single;
    if (s == "multi") return BadgeMode::multi;
    throw ConfigError("unknown badge mode '" + s + "' (expected single or multi)", "data.badge_mode");
}

namespace {

bool is_image_file(const fs::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

std::vector<fs::path> list_images(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: '" + dir.string() + "'");
    std::vector<fs::path> out;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file() && is_image_file(entry.path())) out.push_back(entry.path());
    }
    if (out.empty()) throw FormatError("no PNG/JPEG images under '" + dir.string() + "'");
    std::sort(out.begin(), out.end());
    return out;
}

Corpus scan_corpus(const fs::path& root, Split split) {
    Corpus c;
    c.root = root;
    c.split = split;
    c.image_paths = list_images(root / to_string(split));
    return c;
}

BadgeSet BadgeSet::load(const std::vector<fs::path>& paths, int side, BadgeMode mode) {
    BadgeSet set;
    set.mode = mode;
    set.paths = paths;
    for (const auto& p : paths) set.badges.push_back(load_image(p, side));
    set.validate();
    return set;
}

BadgeSet BadgeSet::from_tensors(const std::vector<torch::Tensor>& images, BadgeMode mode) {
    BadgeSet set;
    set.mode = mode;
    for (const auto& t : images) set.badges.push_back({t, ColorSpace::RGB});
    set.validate();
    return set;
}

void BadgeSet::validate() const {
    if (mode == BadgeMode::single)
        detail::require(badges.size() == 1, "single badge mode needs exactly one badge");
    else
        detail::require(badges.size() >= 2, "multi badge mode needs at least two badges");
    for (const auto& b : badges) {
        detail::require(b.data.dim() == 3 && b.data.size(0) == 3, "badges must be (3, H, W) RGB images");
        detail::require(b.data.sizes() == badges.front().data.sizes(), "badges must share one size");
    }
}

torch::Tensor BadgeSet::stacked() const {
    std::vector<torch::Tensor> v;
    for (const auto& b : badges) v.push_back(b.data);
    return torch::stack(v);
}

uint64_t badge_fingerprint(const torch::Tensor& img) {
    auto bytes = (img.detach().to(torch::kFloat).clamp(0, 1) * 255.0).round().to(torch::kUInt8).contiguous();
    uint64_t h = 1469598103934665603ULL;
    const auto* p = bytes.data_ptr<uint8_t>();
    for (int64_t i = 0; i < bytes.numel(); ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

torch::Tensor load_stack(const std::vector<fs::path>& paths, int side) {
    detail::require(!paths.empty(), "load_stack: no paths");
    std::vector<torch::Tensor> v;
    v.reserve(paths.size());
    for (const auto& p : paths) v.push_back(load_image(p, side).data);
    return torch::stack(v);
}

BatchStream::BatchStream(Corpus corpus, BadgeSet badges, int batch_size, int side, uint64_t seed)
    : corpus_(std::move(corpus)), badges_(std::move(badges)), batch_size_(batch_size), side_(side), seed_(seed) {
    detail::require(batch_size_ >= 1, "batch_size must be at least 1");
    detail::require(!corpus_.image_paths.empty(), "corpus is empty");
    detail::require(static_cast<size_t>(batch_size_) <= corpus_.size(),
                    "batch_size " + std::to_string(batch_size_) + " exceeds corpus size " +
                        std::to_string(corpus_.size()) + "; no full batch can be formed");
    badges_.validate();
    badge_stack_ = badges_.stacked();
    detail::require(badge_stack_.size(2) == side_ && badge_stack_.size(3) == side_,
                    "badges must be loaded at the training image side");
}

int64_t BatchStream::batches_per_epoch() const { return static_cast<int64_t>(corpus_.size()) / batch_size_; }

void BatchStream::seek(int64_t step) {
    detail::require(step >= 0, "seek: negative step");
    step_ = step;
}

const std::vector<size_t>& BatchStream::order_for_epoch(int64_t epoch) {
    if (epoch != cached_epoch_) {
        order_.resize(corpus_.size());
        std::iota(order_.begin(), order_.end(), size_t{0});
        auto rng = derive_rng(seed_, {stream::shuffle, static_cast<uint64_t>(epoch)});
        std::shuffle(order_.begin(), order_.end(), rng);
        cached_epoch_ = epoch;
    }
    return order_;
}

const torch::Tensor& BatchStream::host(size_t index) {
    auto it = cache_.find(index);
    if (it == cache_.end()) it = cache_.emplace(index, load_image(corpus_.image_paths[index], side_).data).first;
    return it->second;
}

Batch BatchStream::next() {
    const int64_t per_epoch = batches_per_epoch();
    const int64_t epoch = step_ / per_epoch;
    const int64_t offset = (step_ % per_epoch) * batch_size_;
    const auto& order = order_for_epoch(epoch);

    Batch b;
    std::vector<torch::Tensor> hosts;
    for (int i = 0; i < batch_size_; ++i) {
        const size_t idx = order[static_cast<size_t>(offset + i)];
        b.host_ids.push_back(idx);
        hosts.push_back(host(idx));
    }
    b.hosts = torch::stack(hosts);

    std::vector<int64_t> ids(static_cast<size_t>(batch_size_), 0);
    if (badges_.mode == BadgeMode::multi) {
        auto rng = derive_rng(seed_, {stream::badge, static_cast<uint64_t>(step_)});
        std::uniform_int_distribution<int64_t> pick(0, static_cast<int64_t>(badges_.size()) - 1);
        for (auto& id : ids) id = pick(rng);
    }
    b.badge_ids = torch::tensor(ids, torch::kInt64);
    b.badges = badge_stack_.index_select(0, b.badge_ids);
    ++step_;
    return b;
}

}  // namespace cpmark
