#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace pfnlab {

// SplitMix64 finalizer. The single mixing primitive every seed derivation in
// the project goes through, so any (seed, stream, counter) triple maps to the
// same value on every platform.
inline uint64_t mix64(uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    return mix64(a ^ (mix64(b) + 0x9E3779B97F4A7C15ull + (a << 6) + (a >> 2)));
}

template <typename... Rest>
uint64_t hash_combine(uint64_t a, uint64_t b, Rest... rest) {
    return hash_combine(hash_combine(a, b), static_cast<uint64_t>(rest)...);
}

// FNV-1a, used for stream ids derived from names and for config hashes.
inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Counter-based deterministic RNG: draw i is a pure function of
// (seed, stream, i). No hidden global state; every stochastic operation in
// the project owns an Rng constructed from explicit seeds.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0)
        : key_(mix64(mix64(seed) ^ (0xA24BAED4963EE407ull + stream))) {}

    uint64_t next_u64() { return mix64(key_ ^ (0x9E3779B97F4A7C15ull * ++ctr_)); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be positive.
    int64_t below(int64_t n) { return int64_t(next_u64() % uint64_t(n)); }

    int64_t uniform_int(int64_t lo, int64_t hi_inclusive) {
        return lo + below(hi_inclusive - lo + 1);
    }

    // Standard Gaussian via Box-Muller; the second sample of each pair is
    // cached, so draw order is deterministic per instance.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    float normal_f() { return static_cast<float>(normal()); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = size_t(below(int64_t(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    // [0, 1, ..., n-1] shuffled.
    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) p[size_t(i)] = i;
        shuffle(p);
        return p;
    }

private:
    uint64_t key_;
    uint64_t ctr_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace pfnlab
