#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace mvit {

// Deterministic RNG. mt19937_64 has a standard-specified sequence; the
// distributions here are hand-rolled (Box-Muller for normals) so streams
// are reproducible across standard libraries.
class Rng {
   public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // [0, 1)
    double uniform01() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    double normal() {
        // 1 - u in (0, 1] keeps the log argument positive
        double u1 = 1.0 - uniform01();
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // inclusive range
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t x;
        do {
            x = eng_();
        } while (x >= limit);
        return lo + static_cast<int64_t>(x % span);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

   private:
    std::mt19937_64 eng_;
};

}  // namespace mvit
