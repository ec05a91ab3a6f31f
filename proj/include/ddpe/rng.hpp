#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

namespace ddpe {

// Named random streams. Each training run draws from separate streams so that
// switching one feature on or off never shifts the draws of another.
enum class Stream : std::uint32_t {
    Init = 1,
    Batching = 2,
    Perturbation = 3,
    Data = 4,
    Probe = 5,
};

// Deterministic generator on top of mt19937_64. The distribution helpers are
// written out by hand because the standard distributions are
// implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed, 0); }

    static Rng stream(std::uint64_t seed, Stream s, std::uint64_t sub = 0) {
        Rng r;
        r.reseed(seed, (static_cast<std::uint64_t>(s) << 32) ^ sub);
        return r;
    }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n), unbiased via rejection.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n <= 1) {
            return 0;
        }
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = engine_();
        while (x >= limit) {
            x = engine_();
        }
        return x % n;
    }

    // Box-Muller; one value per call.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    template <typename Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = i;
        }
        shuffle(p);
        return p;
    }

private:
    void reseed(std::uint64_t seed, std::uint64_t salt) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
        engine_.seed(seq);
    }

    std::mt19937_64 engine_;
};

} // namespace ddpe
