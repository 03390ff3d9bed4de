#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace rebias::nn {

// Dense row-major tensor with an optional gradient buffer of the same shape.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until alloc_grad()

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), values(count(shape), T(0)) {}
    Tensor(std::vector<int> s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
        if (static_cast<std::int64_t>(values.size()) != count(shape))
            throw std::invalid_argument("Tensor: value count does not match shape");
    }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

    T* data() { return values.data(); }
    const T* data() const { return values.data(); }

    void alloc_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    }
    void zero_grad() {
        if (grad.empty()) grad.assign(values.size(), T(0));
        else std::fill(grad.begin(), grad.end(), T(0));
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (std::size_t i = 0; i < values.size(); ++i) out.values[i] = static_cast<U>(values[i]);
        return out;
    }
};

// splitmix64; used to derive independent deterministic streams from (seed, tag) pairs.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ splitmix64(b));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return splitmix64(mix_seed(a, b) ^ splitmix64(c));
}

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(splitmix64(seed)); }

}  // namespace rebias::nn
