#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace anom {

// Counter-based splittable generator. Every draw is a pure function of
// (key, counter), so streams can be split without sharing state and the
// sequence is identical across platforms.
class Rng {
public:
    explicit Rng(uint64_t seed) : key_(mix64(seed ^ 0x5851f42d4c957f2dULL)) {}

    uint64_t next_u64() { return mix64(key_ + (ctr_++) * 0x9e3779b97f4a7c15ULL); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; second value of each pair is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

    // Independent stream derived from this generator's key; does not
    // consume or perturb the parent's counter.
    Rng split(uint64_t stream) const {
        Rng r(0);
        r.key_ = mix64(key_ ^ mix64(stream + 0x94d049bb133111ebULL));
        return r;
    }

    uint64_t key() const { return key_; }

private:
    static uint64_t mix64(uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t key_ = 0;
    uint64_t ctr_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace anom
