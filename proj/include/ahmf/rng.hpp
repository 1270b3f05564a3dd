#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

// Deterministic, platform-independent RNG. Every random draw in the project
// flows from one seed through named sub-streams ("data", "init/<param>",
// "dropout", "schedule", ...), so runs are reproducible and resumable without
// shipping generator state around: a stream is a pure function of
// (seed, label, index).

namespace ahmf {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& s) {
    s += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}
}  // namespace detail

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix(seed, 0, 0)) {}
    Rng(std::uint64_t seed, std::string_view label, std::uint64_t index = 0)
        : state_(mix(seed, detail::fnv1a(label), index)) {}

    std::uint64_t next_u64() { return detail::splitmix64(state_); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

    // Standard normal via Box-Muller; draws two uniforms per call.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            std::uint64_t j = below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t label_hash, std::uint64_t index) {
        std::uint64_t s = seed ^ (label_hash * 0x9e3779b97f4a7c15ULL);
        detail::splitmix64(s);
        s ^= index * 0xd1342543de82ef95ULL;
        detail::splitmix64(s);
        return s;
    }

    std::uint64_t state_;
};

}  // namespace ahmf
