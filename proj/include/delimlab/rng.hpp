// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>

#include "delimlab/tensor.hpp"

namespace delimlab {

/// Deterministic generator used for all synthetic weights.
///
/// Algorithm (fixed so other implementations can regenerate weights):
///   - state advances by 0x9E3779B97F4A7C15 per draw and is mixed with the
///     SplitMix64 finalizer (shifts 30/27/31, multipliers 0xBF58476D1CE4E5B9
///     and 0x94D049BB133111EB);
///   - uniforms are the top 53 bits scaled by 2^-53, in [0, 1);
///   - normals come in Box-Muller pairs from (u1, u2): r = sqrt(-2 ln(1 - u1)),
///     z0 = r cos(2 pi u2) is returned first, z1 = r sin(2 pi u2) second.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) noexcept : state_(seed) {}

    std::uint64_t next_u64() noexcept {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double normal() noexcept {
        if (spare_) {
            const double z = *spare_;
            spare_.reset();
            return z;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        return r * std::cos(theta);
    }

private:
    std::uint64_t state_;
    std::optional<double> spare_;
};

inline Vector normal_stream(SeededRng& rng, std::size_t n) {
    if (n == 0) fail_config("invalid-count", "normal_stream needs n >= 1");
    Vector out(n);
    for (auto& v : out) v = rng.normal();
    return out;
}

}  // namespace delimlab
