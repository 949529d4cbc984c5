#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace equidiag {

/// Explicit-state 64-bit generator (SplitMix64). Every stochastic operation
/// in the toolkit takes the state by reference, so runs are reproducible and
/// parallel callers can fork independent streams instead of sharing one.
struct RngState {
    std::uint64_t s = 0;
};

namespace detail {
inline std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}
}  // namespace detail

inline std::uint64_t next_u64(RngState& r) {
    r.s += 0x9e3779b97f4a7c15ull;
    return detail::mix64(r.s);
}

/// Uniform double in [0, 1).
inline double next_unit(RngState& r) {
    return static_cast<double>(next_u64(r) >> 11) * 0x1.0p-53;
}

/// Uniform double in [lo, hi).
inline double next_uniform(RngState& r, double lo, double hi) {
    return lo + (hi - lo) * next_unit(r);
}

/// Standard normal via Box-Muller (cosine branch only, so the state stays a
/// single 64-bit word).
inline double next_gaussian(RngState& r) {
    double u1 = next_unit(r);
    const double u2 = next_unit(r);
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Derive an independent child stream without advancing the parent.
/// Distinct stream ids give decorrelated sequences.
inline RngState fork(const RngState& r, std::uint64_t stream) {
    RngState child;
    child.s = detail::mix64(r.s + 0x9e3779b97f4a7c15ull * (2 * stream + 1));
    return child;
}

}  // namespace equidiag
