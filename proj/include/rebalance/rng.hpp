#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "rebalance/errors.hpp"

namespace rebalance {

// splitmix64 finalizer; spreads user seeds and derives substreams.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Engine seed for the (seed, stream-tag) substream.
inline std::uint64_t fork_seed(std::uint64_t seed, std::uint64_t stream) {
    return mix_seed(mix_seed(seed) ^ mix_seed(~stream));
}

// Deterministic RNG. The engine is std::mt19937_64, whose raw output is
// fixed by the standard; the distribution helpers are written out here so
// draws are identical across standard libraries too.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    // Independent substream for a (seed, stream-tag) pair.
    static Rng fork(std::uint64_t seed, std::uint64_t stream) {
        return Rng(fork_seed(seed, stream));
    }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1), 53-bit resolution.
    double next_unit() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform on [0, bound), unbiased via rejection.
    std::size_t next_below(std::size_t bound) {
        if (bound == 0) throw InvalidInput("next_below: bound must be positive");
        const std::uint64_t b = bound;
        const std::uint64_t wrap = (UINT64_MAX % b + 1) % b;  // 2^64 mod b
        const std::uint64_t cutoff = UINT64_MAX - wrap;       // last accepted draw
        std::uint64_t x = next_u64();
        while (x > cutoff) x = next_u64();
        return static_cast<std::size_t>(x % b);
    }

    // Standard normal, Box-Muller; the paired deviate is cached.
    double next_gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u = next_unit();
        while (u == 0.0) u = next_unit();
        const double v = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u));
        const double a = 2.0 * std::numbers::pi * v;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // In-place Fisher-Yates.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[next_below(i)]);
        }
    }

    // k distinct values from [0, n), in draw order (partial Fisher-Yates).
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
        if (k > n) throw InvalidInput("sample_without_replacement: k exceeds population");
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) pool[i] = i;
        for (std::size_t i = 0; i < k; ++i) {
            std::swap(pool[i], pool[i + next_below(n - i)]);
        }
        pool.resize(k);
        return pool;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace rebalance
