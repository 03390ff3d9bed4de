#pragma once

#include <cstdint>
#include <type_traits>
#include <random>
#include <vector>

#include "rebias/tensor.hpp"

namespace rebias::hsic {

// RBF bandwidth selection. One sigma per feature stream; with the median
// heuristic the values are refreshed once per epoch, never differentiated.
struct KernelConfig {
    enum class Strategy { Fixed, MedianHeuristic };
    Strategy strategy = Strategy::Fixed;
    double sigma = 1.0;               // Fixed strategy value
    double sample_fraction = 0.25;    // MedianHeuristic subsample, in (0,1]
    double current_sigma_f = 1.0;
    double current_sigma_g = 1.0;

    void validate() const;
};

template <typename T>
struct GramMatrix {
    int n = 0;
    std::vector<T> entries;  // n x n, symmetric, unit diagonal for RBF kernels

    T at(int i, int j) const { return entries[static_cast<std::size_t>(i) * n + j]; }
};

enum class Estimator { Biased, Unbiased };

template <typename T>
struct HsicEstimate {
    T value = T(0);
    Estimator kind = Estimator::Biased;
    int n = 0;
};

// entries[i][j] = exp(-|u_i - u_j|^2 / (2 sigma^2)); features is row-major (n, d).
template <typename T>
GramMatrix<T> rbf_gram(const T* features, int n, int d, double sigma);
template <typename T>
GramMatrix<T> rbf_gram(const nn::Tensor<T>& features, double sigma);

// (1/n^2) trace(K H L H) with H the centering matrix. Always >= 0 up to round-off.
template <typename T>
HsicEstimate<T> hsic_biased(const GramMatrix<T>& K, const GramMatrix<T>& L);

// Unbiased estimator on zero-diagonal kernels; requires n >= 4 and may be negative.
template <typename T>
HsicEstimate<T> hsic_unbiased(const GramMatrix<T>& K, const GramMatrix<T>& L);

// Median of pairwise Euclidean distances over a random row subsample, floored
// at 1e-6 when the sample is degenerate.
template <typename T>
double median_sigma(const T* features, int n, int d, double sample_fraction, std::mt19937_64& rng);
template <typename T>
double median_sigma(const nn::Tensor<T>& features, double sample_fraction, std::mt19937_64& rng);

// Estimator value plus gradients with respect to both raw feature matrices.
// dU/dV may be null; when given they are overwritten ((n, d) row-major).
template <typename T>
double hsic_value_grad(Estimator kind, const T* U, int n, int du, double sigma_u, const T* V,
                       int dv, double sigma_v, T* dU, T* dV);
template <typename T>
double hsic_value_grad(Estimator kind, const nn::Tensor<T>& U, double sigma_u, const nn::Tensor<T>& V,
                       double sigma_v, std::type_identity_t<nn::Tensor<T>>* dU,
                       std::type_identity_t<nn::Tensor<T>>* dV);

}  // namespace rebias::hsic
