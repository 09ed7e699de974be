#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace cpmark {

/// Independent stream keyed by (seed, labels...). Lets any step or epoch be
/// replayed without running the ones before it, which is what makes resume exact.
inline std::mt19937_64 derive_rng(uint64_t seed, std::initializer_list<uint64_t> labels) {
    std::vector<uint32_t> words{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32)};
    for (uint64_t l : labels) {
        words.push_back(static_cast<uint32_t>(l));
        words.push_back(static_cast<uint32_t>(l >> 32));
    }
    std::seed_seq s(words.begin(), words.end());
    return std::mt19937_64(s);
}

namespace stream {
constexpr uint64_t shuffle = 1;
constexpr uint64_t badge = 2;
constexpr uint64_t distortion = 3;
constexpr uint64_t overlay = 4;
}  // namespace stream

}  // namespace cpmark
