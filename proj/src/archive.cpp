#include "cpmark/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cpmark/errors.hpp"

namespace cpmark {
namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

std::string dtype_name(torch::Dtype d) {
    switch (d) {
        case torch::kFloat: return "float32";
        case torch::kDouble: return "float64";
        case torch::kLong: return "int64";
        case torch::kUInt8: return "uint8";
        default: throw ContractViolation("TensorArchive: unsupported dtype");
    }
}

torch::Dtype dtype_from_name(const std::string& s) {
    if (s == "float32") return torch::kFloat;
    if (s == "float64") return torch::kDouble;
    if (s == "int64") return torch::kLong;
    if (s == "uint8") return torch::kUInt8;
    throw FormatError("archive: unknown dtype '" + s + "'");
}

}  // namespace

void TensorArchive::put(std::string name, const torch::Tensor& t) {
    auto stored = t.detach().cpu().contiguous().clone();
    for (auto& [n, existing] : entries_) {
        if (n == name) {
            existing = stored;
            return;
        }
    }
    entries_.emplace_back(std::move(name), std::move(stored));
}

bool TensorArchive::contains(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return true;
    return false;
}

const torch::Tensor& TensorArchive::at(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return t;
    throw FormatError("archive: missing tensor '" + name + "'");
}

void TensorArchive::write(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["meta"] = meta;
    header["tensors"] = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : entries_) {
        const auto nbytes = static_cast<uint64_t>(t.numel()) * t.element_size();
        header["tensors"].push_back({{"name", name},
                                     {"dtype", dtype_name(t.scalar_type())},
                                     {"shape", t.sizes().vec()},
                                     {"offset", offset},
                                     {"nbytes", nbytes}});
        offset += nbytes;
    }
    const std::string text = header.dump();
    const uint64_t length = text.size();

    // Write to a sibling file first so an interrupted save never clobbers a good checkpoint.
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out << kMagic << '\n';
        out.write(reinterpret_cast<const char*>(&length), sizeof(length));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& [name, t] : entries_)
            out.write(static_cast<const char*>(t.data_ptr()),
                      static_cast<std::streamsize>(t.numel() * t.element_size()));
        if (!out) throw IoError("failed writing '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move archive into place at '" + path.string() + "': " + ec.message());
}

TensorArchive TensorArchive::read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open archive '" + path.string() + "'");

    std::string magic;
    std::getline(in, magic);
    if (magic != kMagic) throw FormatError("'" + path.string() + "' is not a " + std::string(kMagic) + " archive");

    uint64_t length = 0;
    in.read(reinterpret_cast<char*>(&length), sizeof(length));
    if (!in || length > (uint64_t{1} << 32)) throw FormatError("archive header is truncated");
    std::string text(length, '\0');
    in.read(text.data(), static_cast<std::streamsize>(length));
    if (!in) throw FormatError("archive header is truncated");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("archive header is not valid JSON: ") + e.what());
    }

    TensorArchive archive;
    archive.meta = header.value("meta", nlohmann::json::object());
    const auto payload_start = in.tellg();
    for (const auto& entry : header.at("tensors")) {
        const auto shape = entry.at("shape").get<std::vector<int64_t>>();
        auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from_name(entry.at("dtype"))));
        const auto nbytes = entry.at("nbytes").get<uint64_t>();
        if (nbytes != static_cast<uint64_t>(t.numel()) * t.element_size())
            throw FormatError("archive: size mismatch for '" + entry.at("name").get<std::string>() + "'");
        in.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
        in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
        if (!in) throw FormatError("archive payload is truncated");
        archive.entries_.emplace_back(entry.at("name").get<std::string>(), std::move(t));
    }
    return archive;
}

}  // namespace cpmark
