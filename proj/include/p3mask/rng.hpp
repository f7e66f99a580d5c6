#pragma once

// Deterministic random number generation.
//
// Every randomized stage of the pipeline (data synthesis, weight init,
// shuffling, subset selection) draws from Rng streams derived from a single
// root seed. The generator core is splitmix64 and all distribution transforms
// are written out here rather than taken from <random>, because the standard
// distributions are not bit-portable across library implementations and the
// pipeline promises byte-identical outputs for a fixed seed.

#include <cstdint>
#include <string_view>
#include <vector>

namespace p3mask {

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// FNV-1a hash of a label, used to give independent seed streams to the
/// different pipeline components.
inline std::uint64_t hash_label(std::string_view label) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Derives a child seed from a root seed, a component label and up to two
/// integer coordinates (e.g. identity index, image index). Children with
/// different labels or coordinates are decorrelated by the splitmix64 mixer.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t s = root ^ hash_label(label);
    splitmix64_next(s);
    s ^= 0x6a09e667f3bcc909ULL + a;
    splitmix64_next(s);
    s ^= 0xbb67ae8584caa73bULL + b;
    return splitmix64_next(s);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return splitmix64_next(state_); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi], inclusive. Unbiased via rejection.
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t r;
        do {
            r = next_u64();
        } while (r >= limit);
        return lo + static_cast<int>(r % span);
    }

    /// Standard normal via Box-Muller; the second variate of each pair is
    /// cached so consecutive calls consume one uniform pair per two normals.
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Fisher-Yates shuffle, driven by uniform_int so the permutation depends
    /// only on the stream state.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            const int j = uniform_int(0, i);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace p3mask
