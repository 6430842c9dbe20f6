#pragma once

// Shared primitives: result type, deterministic rng, id/hash helpers.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <variant>

namespace ardueco {

// Simulated time is integer milliseconds everywhere.
using TimeMs = std::int64_t;

// Minimal expected-style carrier: a value or a module-specific error enum.
template <typename T, typename E>
class [[nodiscard]] Result {
public:
    Result(T value) : repr_(std::in_place_index<0>, std::move(value)) {}
    Result(E error) : repr_(std::in_place_index<1>, error) {}

    bool ok() const { return repr_.index() == 0; }
    explicit operator bool() const { return ok(); }

    const T& value() const& { return std::get<0>(repr_); }
    T& value() & { return std::get<0>(repr_); }
    T&& value() && { return std::get<0>(std::move(repr_)); }
    E error() const { return std::get<1>(repr_); }

private:
    std::variant<T, E> repr_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// mt19937_64 is bit-exact per the standard; the std:: distributions are not,
// so draws are hand-rolled to keep seeded runs byte-reproducible.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Inclusive bounds; modulo bias is irrelevant at simulation ranges.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto range = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(next_u64() % range);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    double normal(double mean, double sd) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + sd * spare_;
        }
        // Box-Muller; u1 nudged away from 0 so log stays finite.
        double u1 = uniform01();
        double u2 = uniform01();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.141592653589793238462643 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mean + sd * r * std::cos(theta);
    }

    // Independent stream derived from this rng's seed lineage.
    Rng fork(std::uint64_t stream) { return Rng(splitmix64(next_u64() ^ splitmix64(stream))); }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// 8 lowercase hex chars, e.g. a ride id.
inline std::string hex_id8(Rng& rng) {
    static const char* digits = "0123456789abcdef";
    std::uint64_t v = rng.next_u64();
    std::string out(8, '0');
    for (int i = 0; i < 8; ++i) {
        out[i] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

// FNV-1a; stable across platforms unlike std::hash.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace ardueco
