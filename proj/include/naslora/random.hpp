// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include "naslora/tensor.hpp"

namespace naslora {

/// SplitMix64 finalizer; used to derive independent stream seeds from structured keys.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = 0x6a09e667f3bcc909ULL;
    for (std::uint64_t k : keys) h = mix_seed(h ^ mix_seed(k));
    return h;
}

using Rng = std::mt19937_64;

inline Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor(shape, std::move(v), requires_grad);
}

inline Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor(shape, std::move(v), requires_grad);
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng, bool requires_grad = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return rand_uniform(shape, rng, -bound, bound, requires_grad);
}

}  // namespace naslora
