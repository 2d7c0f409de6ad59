#pragma once

#include <cstdint>

namespace protodet {

// xoshiro256** seeded through splitmix64. All sampling in the project goes
// through this generator so runs are reproducible byte-for-byte from a seed,
// independent of platform or standard-library version.
class Rng {
  public:
    explicit Rng(uint64_t seed) : seed_(seed) {
        uint64_t s = seed;
        for (auto& w : state_) w = splitmix64(s);
    }

    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Deterministic hash combine for deriving stream seeds.
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
        return splitmix64(x);
    }

    uint64_t next() {
        uint64_t result = rotl(state_[1] * 5, 7) * 9;
        uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Independent generator for a named substream of this one.
    Rng fork(uint64_t salt) const { return Rng(mix(seed_, salt)); }

    uint64_t seed() const { return seed_; }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t seed_;
    uint64_t state_[4];
};

}  // namespace protodet
