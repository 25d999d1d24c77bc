#pragma once

#include <cmath>
#include <random>

#include "caduf/common.hpp"

namespace caduf {

inline u64 splitmix64(u64& state) {
    u64 z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic random stream. Distributions are implemented here rather
// than with std:: distribution objects so that sequences are identical
// across standard library implementations.
class Rng {
  public:
    explicit Rng(u64 seed) : eng_(seed) {}

    // Stream for sample `index` under `master` seed; independent of worker
    // assignment and of how many draws other samples consume.
    static Rng for_sample(u64 master, u64 index) {
        u64 s = master;
        u64 a = splitmix64(s);
        s = a ^ (index * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL);
        u64 b = splitmix64(s);
        return Rng(b);
    }

    u64 next_u64() { return eng_(); }

    // Uniform in [0,1).
    double uniform() {
        return (next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    i64 uniform_int(i64 lo, i64 hi) {  // inclusive range
        if (hi < lo) throw input_error("uniform_int: empty range");
        u64 span = static_cast<u64>(hi - lo) + 1;
        if (span == 0) return lo + static_cast<i64>(next_u64());
        // rejection sampling keeps the result unbiased
        u64 limit = ~u64(0) - (~u64(0) % span);
        u64 v;
        do {
            v = next_u64();
        } while (v >= limit);
        return lo + static_cast<i64>(v % span);
    }

    // Box-Muller; draws pairs, caches the second value.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double t = 2.0 * M_PI * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

  private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace caduf
