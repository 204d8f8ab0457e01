#pragma once

#include <cstdint>
#include <string_view>

namespace simworld {

// SplitMix64 (Steele, Lea, Flood 2014). Chosen over std::mt19937 + std
// distributions because the latter are not specified bit-for-bit across
// standard libraries; all draws here are defined by this header alone.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection (Lemire's bound check omitted
    // for clarity; the loop almost never repeats).
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do { x = next(); } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    std::uint64_t state() const { return state_; }

    // Independent stream for a named purpose / entity: mixes the salt into a
    // fresh seed so per-entity sequences do not depend on global draw order.
    static Rng derive(std::uint64_t seed, std::uint64_t salt) {
        Rng mix(seed ^ (salt * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull));
        return Rng(mix.next());
    }

    static std::uint64_t hash(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
        for (unsigned char c : s) { h ^= c; h *= 0x100000001b3ull; }
        return h;
    }

private:
    std::uint64_t state_;
};

}  // namespace simworld
