#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace fedcctr {

// 64-bit FNV-1a. Used for stream derivation, request hashing and config hashing.
inline uint64_t fnv1a(std::string_view s, uint64_t h = 1469598103934665603ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline uint64_t fnv1a_u64(uint64_t v, uint64_t h = 1469598103934665603ULL) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffU;
        h *= 1099511628211ULL;
    }
    return h;
}

namespace detail {
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
}  // namespace detail

// Counter-based generator (splitmix64 over an incrementing counter). Every
// consumer derives its own stream key, so client noise, batch sampling and
// dropout never share state and parallel execution matches serial execution.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() { return detail::splitmix64(state_); }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n), rejection sampled to avoid modulo bias
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    // standard normal via Box-Muller, spare cached for the next call
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925287 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Derives an independent stream key from a root seed plus a purpose tag and
// integer coordinates (client id, round, ...).
inline uint64_t derive_stream(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0,
                              uint64_t c = 0) {
    uint64_t h = fnv1a_u64(seed);
    h = fnv1a(tag, h);
    h = fnv1a_u64(a, h);
    h = fnv1a_u64(b, h);
    h = fnv1a_u64(c, h);
    return h;
}

}  // namespace fedcctr
