#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace pmnet {

// Seeded generator with fixed draw algorithms. The standard distributions are
// implementation-defined, so uniform draws and shuffles are spelled out here
// to keep seeded runs reproducible across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform double in [lo, hi).
    double uniform(double lo, double hi) {
        const double unit = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
        return lo + unit * (hi - lo);
    }

    // Uniform index in [0, n). n must be nonzero.
    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Fisher-Yates, descending.
    template <typename T>
    void shuffle(std::vector<T>& values) {
        for (std::size_t i = values.size(); i > 1; --i) {
            std::swap(values[i - 1], values[uniform_index(i)]);
        }
    }

    // Derives an independent seed for a named sub-stream (splitmix64 finalizer).
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace pmnet
