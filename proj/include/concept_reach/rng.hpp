#pragma once

// Deterministic RNG with cheap substream derivation. The generator is a
// xoshiro-style splitmix64 chain, so streams derived from (seed, labels...)
// are stable across platforms and independent of call order elsewhere.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

namespace concept_reach {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t hash_combine(uint64_t seed, uint64_t v) {
    uint64_t s = seed ^ (v + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2));
    return splitmix64(s);
}

inline uint64_t hash_str(uint64_t seed, const std::string& s) {
    uint64_t h = seed;
    for (unsigned char c : s) h = hash_combine(h, c);
    return hash_combine(h, s.size());
}

class Rng {
  public:
    explicit Rng(uint64_t seed) : seed_(seed), state_(seed) {
        // decorrelate trivially related seeds
        splitmix64(state_);
    }

    // Derived from the construction seed, not the mutable state, so drawing
    // from the parent never shifts its children.
    Rng substream(uint64_t label) const { return Rng(hash_combine(seed_, label)); }
    Rng substream(const std::string& label) const { return Rng(hash_str(seed_, label)); }

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

    // standard normal via Box-Muller (one value per call; no cached spare, so
    // substreams stay stateless-per-draw)
    double normal() {
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    float normalf() { return float(normal()); }

  private:
    uint64_t seed_;
    uint64_t state_;
};

}  // namespace concept_reach
