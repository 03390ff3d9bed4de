#include "rebias/hsic.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace rebias::hsic {

namespace {

// Squared distances in double with the expanded form clipped at zero.
template <typename T>
std::vector<double> pairwise_sq_dists(const T* x, int n, int d) {
    std::vector<double> sq(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        const T* row = x + static_cast<std::ptrdiff_t>(i) * d;
        for (int c = 0; c < d; ++c) s += static_cast<double>(row[c]) * row[c];
        sq[static_cast<std::size_t>(i)] = s;
    }
    std::vector<double> out(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        const T* ri = x + static_cast<std::ptrdiff_t>(i) * d;
        for (int j = i + 1; j < n; ++j) {
            const T* rj = x + static_cast<std::ptrdiff_t>(j) * d;
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += static_cast<double>(ri[c]) * rj[c];
            const double d2 = std::max(sq[static_cast<std::size_t>(i)] +
                                           sq[static_cast<std::size_t>(j)] - 2.0 * dot,
                                       0.0);
            out[static_cast<std::size_t>(i) * n + j] = d2;
            out[static_cast<std::size_t>(j) * n + i] = d2;
        }
    }
    return out;
}

std::vector<double> gram_from_dists(const std::vector<double>& d2, int n, double sigma) {
    std::vector<double> k(static_cast<std::size_t>(n) * n, 1.0);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double v = std::exp(-d2[static_cast<std::size_t>(i) * n + j] * inv);
            k[static_cast<std::size_t>(i) * n + j] = v;
            k[static_cast<std::size_t>(j) * n + i] = v;
        }
    return k;
}

struct UnbiasedTerms {
    double value = 0.0;
    double c0 = 0.0, c1 = 0.0, c2 = 0.0;     // 1/(n(n-3)), 1/((n-1)(n-2)), 2/(n-2)
    std::vector<double> row_k, row_l;        // zero-diagonal row sums
    double sum_k = 0.0, sum_l = 0.0;
};

// All three terms use forms symmetric in (K, L) so the estimator is exactly
// symmetric in floating point as well.
UnbiasedTerms unbiased_terms(const std::vector<double>& K, const std::vector<double>& L, int n) {
    UnbiasedTerms t;
    t.c0 = 1.0 / (static_cast<double>(n) * (n - 3));
    t.c1 = 1.0 / (static_cast<double>(n - 1) * (n - 2));
    t.c2 = 2.0 / static_cast<double>(n - 2);
    t.row_k.assign(static_cast<std::size_t>(n), 0.0);
    t.row_l.assign(static_cast<std::size_t>(n), 0.0);
    double t1 = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            const double kv = K[static_cast<std::size_t>(i) * n + j];
            const double lv = L[static_cast<std::size_t>(i) * n + j];
            t1 += kv * lv;
            t.row_k[static_cast<std::size_t>(i)] += kv;
            t.row_l[static_cast<std::size_t>(i)] += lv;
        }
        t.sum_k += t.row_k[static_cast<std::size_t>(i)];
        t.sum_l += t.row_l[static_cast<std::size_t>(i)];
    }
    double t3 = 0.0;
    for (int i = 0; i < n; ++i)
        t3 += t.row_k[static_cast<std::size_t>(i)] * t.row_l[static_cast<std::size_t>(i)];
    t.value = t.c0 * (t1 + t.c1 * (t.sum_k * t.sum_l) - t.c2 * t3);
    return t;
}

std::vector<double> center(const std::vector<double>& K, int n) {
    std::vector<double> mu(static_cast<std::size_t>(n), 0.0);
    double grand = 0.0;
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += K[static_cast<std::size_t>(i) * n + j];
        mu[static_cast<std::size_t>(i)] = s / n;
        grand += s;
    }
    grand /= static_cast<double>(n) * n;
    std::vector<double> out(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<std::size_t>(i) * n + j] =
                K[static_cast<std::size_t>(i) * n + j] - mu[static_cast<std::size_t>(i)] -
                mu[static_cast<std::size_t>(j)] + grand;
    return out;
}

template <typename T>
std::vector<double> to_double(const GramMatrix<T>& g) {
    std::vector<double> out(g.entries.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(g.entries[i]);
    return out;
}

void check_pair(int nk, int nl, int min_n, const char* who) {
    if (nk != nl)
        throw std::invalid_argument(std::string(who) + ": Gram matrices have different sizes (" +
                                    std::to_string(nk) + " vs " + std::to_string(nl) + ")");
    if (nk < min_n)
        throw std::invalid_argument(std::string(who) + ": needs a batch of at least " +
                                    std::to_string(min_n) + " samples, got " + std::to_string(nk));
}

}  // namespace

void KernelConfig::validate() const {
    if (sigma <= 0.0) throw std::invalid_argument("KernelConfig: sigma must be > 0");
    if (current_sigma_f <= 0.0 || current_sigma_g <= 0.0)
        throw std::invalid_argument("KernelConfig: current sigma values must be > 0");
    if (sample_fraction <= 0.0 || sample_fraction > 1.0)
        throw std::invalid_argument("KernelConfig: sample_fraction must be in (0,1]");
}

template <typename T>
GramMatrix<T> rbf_gram(const T* features, int n, int d, double sigma) {
    if (n < 1) throw std::invalid_argument("rbf_gram: need at least one row");
    if (sigma <= 0.0) throw std::invalid_argument("rbf_gram: sigma must be > 0");
    const auto d2 = pairwise_sq_dists(features, n, d);
    const auto k = gram_from_dists(d2, n, sigma);
    GramMatrix<T> g;
    g.n = n;
    g.entries.resize(k.size());
    for (std::size_t i = 0; i < k.size(); ++i) g.entries[i] = static_cast<T>(k[i]);
    return g;
}

template <typename T>
GramMatrix<T> rbf_gram(const nn::Tensor<T>& features, double sigma) {
    if (features.shape.size() != 2) throw std::invalid_argument("rbf_gram: features must be (n, d)");
    return rbf_gram(features.data(), features.dim(0), features.dim(1), sigma);
}

template <typename T>
HsicEstimate<T> hsic_biased(const GramMatrix<T>& K, const GramMatrix<T>& L) {
    check_pair(K.n, L.n, 2, "hsic_biased");
    const int n = K.n;
    const auto kc = center(to_double(K), n);
    const auto lc = center(to_double(L), n);
    double s = 0.0;
    for (std::size_t i = 0; i < kc.size(); ++i) s += kc[i] * lc[i];
    return {static_cast<T>(s / (static_cast<double>(n) * n)), Estimator::Biased, n};
}

template <typename T>
HsicEstimate<T> hsic_unbiased(const GramMatrix<T>& K, const GramMatrix<T>& L) {
    check_pair(K.n, L.n, 4, "hsic_unbiased");
    const auto t = unbiased_terms(to_double(K), to_double(L), K.n);
    return {static_cast<T>(t.value), Estimator::Unbiased, K.n};
}

template <typename T>
double median_sigma(const T* features, int n, int d, double sample_fraction,
                    std::mt19937_64& rng) {
    if (sample_fraction <= 0.0 || sample_fraction > 1.0)
        throw std::invalid_argument("median_sigma: sample_fraction must be in (0,1]");
    const int m = static_cast<int>(std::ceil(sample_fraction * n));
    if (m < 2)
        throw std::invalid_argument("median_sigma: needs at least 2 sampled rows, got " +
                                    std::to_string(m));
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < m; ++i) {
        const std::uint64_t j = static_cast<std::uint64_t>(i) +
                                rng() % static_cast<std::uint64_t>(n - i);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    std::vector<double> dist;
    dist.reserve(static_cast<std::size_t>(m) * (m - 1) / 2);
    for (int a = 0; a < m; ++a)
        for (int b = a + 1; b < m; ++b) {
            const T* ra = features + static_cast<std::ptrdiff_t>(idx[static_cast<std::size_t>(a)]) * d;
            const T* rb = features + static_cast<std::ptrdiff_t>(idx[static_cast<std::size_t>(b)]) * d;
            double s = 0.0;
            for (int c = 0; c < d; ++c) {
                const double df = static_cast<double>(ra[c]) - static_cast<double>(rb[c]);
                s += df * df;
            }
            dist.push_back(std::sqrt(s));
        }
    std::sort(dist.begin(), dist.end());
    const std::size_t k = dist.size();
    double med = (k % 2 == 1) ? dist[k / 2] : 0.5 * (dist[k / 2 - 1] + dist[k / 2]);
    if (med <= 0.0) med = 1e-6;
    return med;
}

template <typename T>
double median_sigma(const nn::Tensor<T>& features, double sample_fraction, std::mt19937_64& rng) {
    if (features.shape.size() != 2)
        throw std::invalid_argument("median_sigma: features must be (n, d)");
    return median_sigma(features.data(), features.dim(0), features.dim(1), sample_fraction, rng);
}

template <typename T>
double hsic_value_grad(Estimator kind, const T* U, int n, int du, double sigma_u, const T* V,
                       int dv, double sigma_v, T* dU, T* dV) {
    if (n < (kind == Estimator::Unbiased ? 4 : 2))
        throw std::invalid_argument("hsic_value_grad: batch too small for the estimator");
    const auto d2u = pairwise_sq_dists(U, n, du);
    const auto d2v = pairwise_sq_dists(V, n, dv);
    const auto K = gram_from_dists(d2u, n, sigma_u);
    const auto L = gram_from_dists(d2v, n, sigma_v);

    double value;
    // W is the symmetrized sensitivity d value / d K_pq (+ transpose); diagonal unused.
    std::vector<double> WK(static_cast<std::size_t>(n) * n, 0.0);
    std::vector<double> WL(static_cast<std::size_t>(n) * n, 0.0);
    if (kind == Estimator::Unbiased) {
        const auto t = unbiased_terms(K, L, n);
        value = t.value;
        for (int p = 0; p < n; ++p)
            for (int q = 0; q < n; ++q) {
                if (p == q) continue;
                const std::size_t pq = static_cast<std::size_t>(p) * n + q;
                WK[pq] = t.c0 * (2.0 * L[pq] + 2.0 * t.c1 * t.sum_l -
                                 t.c2 * (t.row_l[static_cast<std::size_t>(p)] +
                                         t.row_l[static_cast<std::size_t>(q)]));
                WL[pq] = t.c0 * (2.0 * K[pq] + 2.0 * t.c1 * t.sum_k -
                                 t.c2 * (t.row_k[static_cast<std::size_t>(p)] +
                                         t.row_k[static_cast<std::size_t>(q)]));
            }
    } else {
        const auto kc = center(K, n);
        const auto lc = center(L, n);
        double s = 0.0;
        for (std::size_t i = 0; i < kc.size(); ++i) s += kc[i] * lc[i];
        const double inv_n2 = 1.0 / (static_cast<double>(n) * n);
        value = s * inv_n2;
        for (std::size_t i = 0; i < kc.size(); ++i) {
            WK[i] = 2.0 * inv_n2 * lc[i];
            WL[i] = 2.0 * inv_n2 * kc[i];
        }
    }

    auto chain = [n](const std::vector<double>& W, const std::vector<double>& G, const T* X, int d,
                     double sigma, T* dX) {
        if (!dX) return;
        const double inv_s2 = 1.0 / (sigma * sigma);
        std::vector<double> acc(static_cast<std::size_t>(d));
        for (int p = 0; p < n; ++p) {
            std::fill(acc.begin(), acc.end(), 0.0);
            const T* xp = X + static_cast<std::ptrdiff_t>(p) * d;
            for (int q = 0; q < n; ++q) {
                if (q == p) continue;
                const std::size_t pq = static_cast<std::size_t>(p) * n + q;
                const double w = -W[pq] * G[pq] * inv_s2;
                if (w == 0.0) continue;
                const T* xq = X + static_cast<std::ptrdiff_t>(q) * d;
                for (int c = 0; c < d; ++c)
                    acc[static_cast<std::size_t>(c)] +=
                        w * (static_cast<double>(xp[c]) - static_cast<double>(xq[c]));
            }
            T* out = dX + static_cast<std::ptrdiff_t>(p) * d;
            for (int c = 0; c < d; ++c) out[c] = static_cast<T>(acc[static_cast<std::size_t>(c)]);
        }
    };
    chain(WK, K, U, du, sigma_u, dU);
    chain(WL, L, V, dv, sigma_v, dV);
    return value;
}

template <typename T>
double hsic_value_grad(Estimator kind, const nn::Tensor<T>& U, double sigma_u, const nn::Tensor<T>& V,
                       double sigma_v, std::type_identity_t<nn::Tensor<T>>* dU,
                       std::type_identity_t<nn::Tensor<T>>* dV) {
    if (U.shape.size() != 2 || V.shape.size() != 2 || U.dim(0) != V.dim(0))
        throw std::invalid_argument("hsic_value_grad: features must be (n, d) with matching n");
    if (dU) *dU = nn::Tensor<T>(U.shape);
    if (dV) *dV = nn::Tensor<T>(V.shape);
    return hsic_value_grad(kind, U.data(), U.dim(0), U.dim(1), sigma_u, V.data(), V.dim(1),
                           sigma_v, dU ? dU->data() : nullptr, dV ? dV->data() : nullptr);
}

#define REBIAS_HSIC_INSTANTIATE(T)                                                              \
    template GramMatrix<T> rbf_gram<T>(const T*, int, int, double);                             \
    template GramMatrix<T> rbf_gram<T>(const nn::Tensor<T>&, double);                               \
    template HsicEstimate<T> hsic_biased<T>(const GramMatrix<T>&, const GramMatrix<T>&);        \
    template HsicEstimate<T> hsic_unbiased<T>(const GramMatrix<T>&, const GramMatrix<T>&);      \
    template double median_sigma<T>(const T*, int, int, double, std::mt19937_64&);              \
    template double median_sigma<T>(const nn::Tensor<T>&, double, std::mt19937_64&);                \
    template double hsic_value_grad<T>(Estimator, const T*, int, int, double, const T*, int,    \
                                       double, T*, T*);                                         \
    template double hsic_value_grad<T>(Estimator, const nn::Tensor<T>&, double, const nn::Tensor<T>&,   \
                                       double, std::type_identity_t<nn::Tensor<T>>*, std::type_identity_t<nn::Tensor<T>>*);

REBIAS_HSIC_INSTANTIATE(float)
REBIAS_HSIC_INSTANTIATE(double)

#undef REBIAS_HSIC_INSTANTIATE

}  // namespace rebias::hsic
