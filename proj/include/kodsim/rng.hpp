#pragma once

#include <cmath>
#include <cstdint>

namespace kodsim {

// Counter-seeded xoshiro256++ with Box-Muller normals.  Self-contained so
// that seeded runs reproduce bit-identically across standard libraries;
// golden values committed with the repo depend on this.
class Rng {
public:
    explicit Rng(uint64_t seed) { reseed(seed); }

    // Independent stream for trajectory `id` under a master seed.  Streams
    // are decorrelated by running the seed sequence through splitmix64, so
    // results do not depend on thread scheduling.
    static Rng stream(uint64_t master_seed, uint64_t id) {
        uint64_t x = master_seed + 0x9e3779b97f4a7c15ull * (id + 1);
        Rng r(0);
        r.reseed_mix(x);
        return r;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform on (0,1]; never returns 0 so log() is safe.
    double uniform() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(th);
        has_spare_ = true;
        return r * std::cos(th);
    }

    void reseed(uint64_t seed) { reseed_mix(seed); }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    void reseed_mix(uint64_t x) {
        for (auto& s : s_) s = splitmix64(x);
        has_spare_ = false;
        spare_ = 0.0;
        // warm up, discards any seeding artifacts in the low state
        for (int i = 0; i < 8; ++i) next_u64();
    }

    uint64_t s_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace kodsim
