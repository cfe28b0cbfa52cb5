#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "cpdiff/array.hpp"

namespace cpdiff {

// Deterministic PRNG. Normal variates come from an explicit Box-Muller
// transform so the draw sequence does not depend on the standard library's
// distribution internals.
class Rng {
  public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(eng_() % span);
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void fill_normal(ArrayT<T>& a, double mean, double stddev) {
        for (auto& v : a.data) v = static_cast<T>(normal(mean, stddev));
    }

    template <typename T>
    void fill_uniform(ArrayT<T>& a, double lo, double hi) {
        for (auto& v : a.data) v = static_cast<T>(uniform(lo, hi));
    }

  private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stage seeds are derived from the master seed by hashing a label, so adding
// a stage never shifts the draws of another.
inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
    uint64_t h = 0xcbf29ce484222325ull ^ base;
    for (char c : tag) {
        h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
        h *= 0x100000001b3ull;
    }
    // splitmix64 finalizer
    h += 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
}

inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t index) {
    return derive_seed(derive_seed(base, tag), std::to_string(index));
}

}  // namespace cpdiff
