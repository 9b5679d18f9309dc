#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "metairnet/tensor.hpp"

namespace metairnet {

using Rng = std::mt19937_64;

/// 64-bit FNV-1a; stable across platforms, used to key seeds by name.
inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Deterministic child seed of `parent` for the named stage.
inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view stage) {
    return splitmix64(parent ^ splitmix64(fnv1a(stage)));
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index) {
    return splitmix64(parent ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

template <typename S>
Tensor<S> randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor<S> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (Index i = 0; i < t.size(); ++i) t.data[i] = static_cast<S>(dist(rng));
    return t;
}

template <typename S>
Tensor<S> rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor<S> t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (Index i = 0; i < t.size(); ++i) t.data[i] = static_cast<S>(dist(rng));
    return t;
}

}  // namespace metairnet
