#pragma once

// Splittable counter-based pseudo-random streams.
//
// All randomness in the library flows through `Rng`, a SplitMix64 generator.
// Independent streams are derived — never shared — by hashing a parent seed
// with small integer tags (`derive_seed`), so results are reproducible for a
// fixed master seed regardless of execution order or thread count.
//
// Distribution choices are fixed per build: Normal via Box–Muller, Gamma via
// Marsaglia–Tsang, Beta as G1/(G1+G2) from two Gamma draws.

#include <cassert>
#include <cmath>
#include <cstdint>

namespace maxrm {

// ============================================================================
// Seed derivation
// ============================================================================

inline constexpr std::uint64_t kGolden64 = 0x9e3779b97f4a7c15ULL;

/// One SplitMix64 scramble of x (stateless).
inline std::uint64_t mix64(std::uint64_t x) {
    x += kGolden64;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Child stream seed from (parent seed, tag). Chain calls for key tuples,
/// e.g. derive_seed(derive_seed(master, kTagBootstrap), tree_index).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    return mix64(seed ^ mix64(tag));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    return derive_seed(derive_seed(seed, a), b);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                                 std::uint64_t c) {
    return derive_seed(derive_seed(seed, a, b), c);
}

/// Stream purpose tags; every derived stream mixes one of these in so streams
/// for different purposes never collide even with equal numeric sub-keys.
enum StreamTag : std::uint64_t {
    kTagDgpParams = 1,   // per-environment fixed DGP parameters (Beta shapes)
    kTagTrainX = 2,      // training covariates
    kTagTrainNoise = 3,  // training response noise
    kTagTestX = 4,       // test covariates
    kTagTestNoise = 5,   // test response noise
    kTagGpDraw = 6,      // Gaussian-process function values
    kTagBootstrap = 7,   // per-tree bootstrap resampling
    kTagTreeGrowth = 8,  // per-tree split-feature sampling
    kTagHoldout = 9,     // stratified fit/holdout split
    kTagRepetition = 10, // per-repetition experiment seeds
    kTagMethod = 11,     // per-method fitting seeds within a repetition
    kTagMise = 12,       // MISE covariate sample
    kTagPermutation = 13,// permutation-test sign flips
    kTagMixtureQ = 14,   // convex-hull mixture weights
    kTagProbe = 15,      // consistency-probe resamples
    kTagOffsets = 16,    // regret-offset tree seeds
};

// ============================================================================
// Generator
// ============================================================================

/// SplitMix64 stream with the usual real-valued draws. 8 bytes of state,
/// cheap to construct per node/tree/repetition.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += kGolden64;
        std::uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    /// Independent child stream; does not advance this stream.
    Rng split(std::uint64_t tag) const { return Rng(derive_seed(state_, tag)); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform on [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Multiply-shift; bias < 2^-53 for n below 2^11
    /// and negligible at every size used here.
    std::uint64_t below(std::uint64_t n) {
        assert(n > 0);
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next()) * n) >> 64);
    }

    /// Standard normal via Box–Muller; the paired draw is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    /// Gamma(shape, 1) via Marsaglia–Tsang squeeze; shape < 1 boosted.
    double gamma(double shape) {
        assert(shape > 0.0);
        if (shape < 1.0) {
            const double u = uniform();
            return gamma(shape + 1.0) * std::pow(u > 0.0 ? u : 0x1.0p-53, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = 0.0;
            double v = 0.0;
            do {
                x = normal();
                v = 1.0 + c * x;
            } while (v <= 0.0);
            v = v * v * v;
            const double u = uniform();
            if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
            if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
        }
    }

    /// Beta(a, b) from two Gamma draws.
    double beta(double a, double b) {
        const double g1 = gamma(a);
        const double g2 = gamma(b);
        return g1 / (g1 + g2);
    }

  private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace maxrm
