#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "speclab/errors.hpp"

namespace speclab {

// xoshiro256** seeded through splitmix64. Self-contained so that streams are
// bit-reproducible across standard libraries and platforms.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& s : state_) {
            x += 0x9e3779b97f4a7c15ull;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            s = z ^ (z >> 31);
        }
        have_spare_ = false;
    }

    uint64_t next_u64() {
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

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller with a cached spare.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    int64_t uniform_int(int64_t n) {
        if (n <= 0) throw ContractError("Rng::uniform_int: n must be positive");
        return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4] = {};
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Source of the discrete random decisions taken by sampling and verification.
// The production implementation draws from an Rng; tests substitute an
// enumerating source to explore every branch with its exact probability.
class RandomSource {
public:
    virtual ~RandomSource() = default;

    // Index into `probs` (need not be normalized away from 1 by more than rounding).
    virtual int64_t categorical(std::span<const double> probs) = 0;

    // True with probability min(1, p).
    virtual bool bernoulli(double p) = 0;
};

class RngSource final : public RandomSource {
public:
    explicit RngSource(Rng& rng) : rng_(rng) {}

    int64_t categorical(std::span<const double> probs) override {
        if (probs.empty()) throw ContractError("categorical: empty distribution");
        const double r = rng_.uniform();
        double acc = 0.0;
        int64_t last_positive = -1;
        for (size_t i = 0; i < probs.size(); ++i) {
            if (probs[i] <= 0.0) continue;
            last_positive = static_cast<int64_t>(i);
            acc += probs[i];
            if (r < acc) return last_positive;
        }
        if (last_positive < 0) throw ContractError("categorical: all-zero distribution");
        return last_positive;
    }

    bool bernoulli(double p) override {
        if (p >= 1.0) return true;
        if (p <= 0.0) return false;
        return rng_.uniform() < p;
    }

private:
    Rng& rng_;
};

}  // namespace speclab
