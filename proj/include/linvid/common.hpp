#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace linvid {

// Error taxonomy. The CLI maps these onto exit codes: config 2, numeric 3, io 4.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract violation: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

// Per-precision tolerance constants for gradient checking.
template <typename T>
struct GradTol;

template <>
struct GradTol<double> {
    static constexpr double step = 1e-5;
    static constexpr double max_rel_err = 1e-4;
};

template <>
struct GradTol<float> {
    static constexpr double step = 1e-2;
    static constexpr double max_rel_err = 3e-2;
};

// Deterministic RNG. std::mt19937_64 has a portable bit stream; the
// distributions in <random> do not, so uniform/normal are derived by hand.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return state_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(state_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Marsaglia polar method would branch on the stream; Box-Muller keeps the
    // draw count fixed at two per call.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(state_() % static_cast<std::uint64_t>(n));
    }

    // Independent per-item stream: splitmix64 over (seed, index).
    static Rng derive(std::uint64_t seed, std::uint64_t index) {
        std::uint64_t x = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
        x ^= x >> 30;
        x *= 0xBF58476D1CE4E5B9ULL;
        x ^= x >> 27;
        x *= 0x94D049BB133111EBULL;
        x ^= x >> 31;
        return Rng(x);
    }

private:
    std::mt19937_64 state_;
};

}  // namespace linvid
