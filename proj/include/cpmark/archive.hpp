#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace cpmark {

/// Single-file container for named tensors plus a JSON metadata block.
///
/// Layout:
///   magic line  "CPMARK-CKPT-v1\n"
///   uint64 LE   length of the JSON header
///   JSON header {"meta": {...}, "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}
///   raw little-endian tensor payloads, offsets relative to the end of the header
class TensorArchive {
public:
    static constexpr std::string_view kMagic = "CPMARK-CKPT-v1";

    nlohmann::json meta = nlohmann::json::object();

    void put(std::string name, const torch::Tensor& t);
    bool contains(const std::string& name) const;
    const torch::Tensor& at(const std::string& name) const;
    const std::vector<std::pair<std::string, torch::Tensor>>& entries() const { return entries_; }

    void write(const std::filesystem::path& path) const;
    static TensorArchive read(const std::filesystem::path& path);

private:
    std::vector<std::pair<std::string, torch::Tensor>> entries_;
};

}  // namespace cpmark
