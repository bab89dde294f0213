#pragma once

#include <cmath>
#include <cstdint>

namespace qlcb {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

} // namespace detail

/// Deterministic xoshiro256++ generator with splitmix64 seeding.
///
/// All sampling (uniform, normal, truncated normal) is implemented here so a
/// stream's output depends only on (seed, stream id) and never on the host
/// standard library. Substreams are derived by hashing the stream id into the
/// seed, so per-episode / per-member generation is schedule independent.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = detail::splitmix64(sm);
    }

    /// Independent stream `stream_id` of the generator family keyed by `seed`.
    static Rng substream(std::uint64_t seed, std::uint64_t stream_id) {
        std::uint64_t sm = seed;
        std::uint64_t mixed = detail::splitmix64(sm) ^ (0x9e3779b97f4a7c15ULL * (stream_id + 1));
        return Rng(mixed);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform01();
    }

    /// Standard normal via Box-Muller; the paired sample is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * kPi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    /// Standard normal conditioned on |z| <= cut, via rejection.
    double truncated_normal(double cut = 2.0) {
        for (;;) {
            const double z = normal();
            if (z >= -cut && z <= cut) return z;
        }
    }

    std::uint64_t below(std::uint64_t n) {
        // Multiply-shift bounded draw; bias is negligible for n << 2^64.
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

private:
    static constexpr double kPi = 3.14159265358979323846;

    std::uint64_t state_[4];
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace qlcb
