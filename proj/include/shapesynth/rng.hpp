#pragma once

// Counter-based random streams. A stream is a pure function of (master seed, label, counter),
// so any zone or stratum can be processed on any thread in any order and draw the same numbers.

#include <cstdint>
#include <string_view>

namespace shapesynth::rng {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// 64-bit FNV-1a; stable across platforms, used to key streams by zone id.
constexpr std::uint64_t fnv1a(std::string_view text) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Stream {
public:
    Stream(std::uint64_t seed, std::string_view label) noexcept
        : key_{mix64(seed ^ mix64(fnv1a(label) + 0x9e3779b97f4a7c15ULL))} {}

    Stream(std::uint64_t seed, std::uint64_t label) noexcept
        : key_{mix64(seed ^ mix64(label + 0x632be59bd9b4e019ULL))} {}

    std::uint64_t next() noexcept {
        ++counter_;
        return mix64(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform integer on [0, bound); bound must be > 0. Lemire's rejection method, unbiased.
    std::uint64_t below(std::uint64_t bound) noexcept {
        unsigned __int128 m = static_cast<unsigned __int128>(next()) * bound;
        auto low = static_cast<std::uint64_t>(m);
        if (low < bound) {
            const std::uint64_t threshold = (0 - bound) % bound;
            while (low < threshold) {
                m = static_cast<unsigned __int128>(next()) * bound;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    [[nodiscard]] std::uint64_t draws() const noexcept { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

} // namespace shapesynth::rng
