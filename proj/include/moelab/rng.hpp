#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "moelab/common.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// Counter-based generator: output i is a pure hash of (seed, i). There is no
// sequential state to carry, so parallel and serial generation of the same
// index range produce identical streams.
class CounterRng {
  public:
    explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

    static std::uint64_t mix64(std::uint64_t x) {
        x ^= x >> 33;
        x *= 0xff51afd7ed558ccdULL;
        x ^= x >> 33;
        x *= 0xc4ceb9fe1a85ec53ULL;
        x ^= x >> 33;
        return x;
    }

    static std::uint64_t hash2(std::uint64_t seed, std::uint64_t ctr) {
        return mix64(mix64(seed + 0x9e3779b97f4a7c15ULL) ^ mix64(ctr + 0xbf58476d1ce4e5b9ULL));
    }

    std::uint64_t seed() const { return seed_; }

    // Independent substream; safe to hand to parallel workers.
    CounterRng stream(std::uint64_t id) const { return CounterRng(hash2(seed_, id ^ 0xa5a5a5a5a5a5a5a5ULL)); }

    std::uint64_t at(std::uint64_t counter) const { return hash2(seed_, counter); }

    // Uniform in (0, 1]: 53 random bits, never exactly zero.
    double uniform01_at(std::uint64_t counter) const {
        return (static_cast<double>(at(counter) >> 11) + 1.0) * 0x1.0p-53;
    }

    // Sequential convenience interface on top of the counter stream.
    std::uint64_t next_u64() { return at(counter_++); }
    double next_uniform01() { return uniform01_at(counter_++); }

    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform01(); }

    // Standard normal via Box-Muller on dedicated counters.
    double normal_at(std::uint64_t counter) const {
        const double u1 = uniform01_at(2 * counter);
        const double u2 = uniform01_at(2 * counter + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double next_normal() { return normal_at(counter_++); }

    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

enum class InitDistribution { Uniform, TruncatedNormal };

inline InitDistribution parse_distribution(const std::string& s) {
    if (s == "uniform") return InitDistribution::Uniform;
    if (s == "truncated_normal") return InitDistribution::TruncatedNormal;
    throw ParameterError("unknown init distribution: " + s);
}

namespace detail {
// Variance of a standard normal truncated to [-2, 2]; draws are rescaled by
// 1/sqrt of this so the requested variance is hit exactly in expectation.
inline constexpr double kTruncNormalVar = 0.77374201465191098;
}  // namespace detail

// Deterministic init draw. Each element owns a disjoint counter range, so the
// same (seed, shape) pair gives the same tensor no matter how it is evaluated.
template <typename S>
Tensor<S> seeded_init(std::vector<std::size_t> shape, InitDistribution dist, double variance,
                      const CounterRng& rng) {
    if (variance < 0.0) throw ParameterError("seeded_init: variance must be >= 0");
    Tensor<S> t(std::move(shape));
    if (variance == 0.0) return t;
    const std::size_t n = t.numel();
    if (dist == InitDistribution::Uniform) {
        const double half_width = std::sqrt(3.0 * variance);
        for (std::size_t i = 0; i < n; ++i) {
            const double u = rng.uniform01_at(i);
            t.data[i] = static_cast<S>((2.0 * u - 1.0) * half_width);
        }
    } else {
        const double scale = std::sqrt(variance / detail::kTruncNormalVar);
        for (std::size_t i = 0; i < n; ++i) {
            // Rejection attempts use per-element counters; at most 64 tries.
            double z = 0.0;
            bool ok = false;
            for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
                z = rng.normal_at((static_cast<std::uint64_t>(i) << 6) | attempt);
                if (z >= -2.0 && z <= 2.0) {
                    ok = true;
                    break;
                }
            }
            if (!ok) z = 0.0;
            t.data[i] = static_cast<S>(z * scale);
        }
    }
    return t;
}

}  // namespace moelab
