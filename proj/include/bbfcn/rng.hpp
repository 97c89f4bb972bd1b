#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>

namespace bbfcn {

/// splitmix64, used for seeding and for stateless per-index streams.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// xoshiro256** with an explicit, serializable state. The standard library
/// distributions are implementation-defined, so all sampling here is spelled
/// out to keep artifacts byte-identical across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
        has_spare_ = false;
        spare_ = 0.0;
    }

    uint64_t next_u64() {
        auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform integer in [0, n), n > 0. Rejection-free modulo bias is
    /// irrelevant at these ranges but rejection keeps it exact anyway.
    uint64_t next_below(uint64_t n) {
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    int next_int(int lo, int hi) {  // inclusive range
        return lo + static_cast<int>(next_below(static_cast<uint64_t>(hi - lo + 1)));
    }

    /// Uniform in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    /// Box-Muller with a cached spare.
    double gaussian(double mean, double stddev) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1, u2;
        do {
            u1 = next_double();
        } while (u1 <= 0.0);
        u2 = next_double();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        const double two_pi = 6.283185307179586476925286766559;
        spare_ = mag * std::sin(two_pi * u2);
        has_spare_ = true;
        return mean + stddev * mag * std::cos(two_pi * u2);
    }

    /// State serialization for resumable training.
    std::string save_state() const {
        std::string out;
        for (int i = 0; i < 4; ++i) out += std::to_string(s_[i]) + (i < 3 ? " " : "");
        out += " " + std::to_string(has_spare_ ? 1 : 0);
        out += " " + std::to_string(spare_);
        return out;
    }

    bool load_state(const std::string& text) {
        uint64_t s[4];
        int spare_flag = 0;
        double spare = 0.0;
        if (std::sscanf(text.c_str(), "%lu %lu %lu %lu %d %lf", &s[0], &s[1], &s[2], &s[3],
                        &spare_flag, &spare) != 6)
            return false;
        for (int i = 0; i < 4; ++i) s_[i] = s[i];
        has_spare_ = spare_flag != 0;
        spare_ = spare;
        return true;
    }

private:
    uint64_t s_[4] = {};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace bbfcn
