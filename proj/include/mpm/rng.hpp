#pragma once

#include <cstdint>
#include <limits>

namespace mpm {

// splitmix64, used to mix (seed, tag...) tuples into independent substream seeds.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t substream(uint64_t seed, uint64_t a) { return mix64(seed ^ mix64(a)); }

inline uint64_t substream(uint64_t seed, uint64_t a, uint64_t b) {
    return mix64(substream(seed, a) ^ mix64(b + 0x6a09e667f3bcc909ULL));
}

// Purpose tags for derived substreams. Fixed values so trajectories never shift
// when unrelated draws are added or removed.
enum : uint64_t {
    kTagInit = 1,
    kTagShuffle = 2,
    kTagTrainNeg = 3,
    kTagValNeg = 4,
    kTagTestNeg = 5,
    kTagDropout = 6,
    kTagSynthetic = 7,
};

// Deterministic generator with a fully pinned algorithm (xoshiro256**), so
// identical seeds give bitwise-identical streams on every platform. The
// bounded-int and unit-interval draws below are pinned too; std::'s
// distributions are implementation-defined and would break the contract.
class SplitRng {
   public:
    explicit SplitRng(uint64_t seed) {
        uint64_t s = seed;
        for (auto& w : state_) {
            s = mix64(s);
            w = s;
        }
    }

    uint64_t next() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform integer in [0, n). Rejection-free Lemire reduction with the
    // standard high-bits correction.
    uint64_t below(uint64_t n) {
        if (n == 0) return 0;
        uint64_t x = next();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        uint64_t lo = static_cast<uint64_t>(m);
        if (lo < n) {
            uint64_t threshold = (0 - n) % n;
            while (lo < threshold) {
                x = next();
                m = static_cast<__uint128_t>(x) * n;
                lo = static_cast<uint64_t>(m);
            }
        }
        return static_cast<uint64_t>(m >> 64);
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

   private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4];
};

}  // namespace mpm
