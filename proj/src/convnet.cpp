#include "rebias/convnet.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rebias::nn {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;
constexpr int kDwChunk = 32;  // samples per weight-gradient accumulator; fixed so
                              // reductions are order-stable for any thread count

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
std::vector<T>& scratch_buffer(int which, std::size_t n) {
    static thread_local std::vector<T> bufs[2];
    auto& b = bufs[which];
    if (b.size() < n) b.resize(n);
    return b;
}

// Gathers the (C_in*k*k, H*W) patch matrix for one sample, zero padded.
template <typename T>
void im2col(const T* in, int cin, int h, int w, int k, T* cols) {
    const int pad = k / 2;
    const int hw = h * w;
    for (int c = 0; c < cin; ++c) {
        const T* chan = in + static_cast<std::ptrdiff_t>(c) * hw;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                T* row = cols + static_cast<std::ptrdiff_t>((c * k + ky) * k + kx) * hw;
                const int x0 = std::max(0, pad - kx);
                const int x1 = std::min(w, w + pad - kx);
                for (int y = 0; y < h; ++y) {
                    T* dst = row + y * w;
                    const int sy = y + ky - pad;
                    if (sy < 0 || sy >= h) {
                        std::fill(dst, dst + w, T(0));
                        continue;
                    }
                    if (x0 > 0) std::fill(dst, dst + x0, T(0));
                    if (x1 < w) std::fill(dst + x1, dst + w, T(0));
                    if (x1 > x0)
                        std::memcpy(dst + x0, chan + sy * w + x0 + kx - pad,
                                    static_cast<std::size_t>(x1 - x0) * sizeof(T));
                }
            }
        }
    }
}

// Scatter-add transpose of im2col.
template <typename T>
void col2im_add(const T* cols, int cin, int h, int w, int k, T* din) {
    const int pad = k / 2;
    const int hw = h * w;
    for (int c = 0; c < cin; ++c) {
        T* chan = din + static_cast<std::ptrdiff_t>(c) * hw;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const T* row = cols + static_cast<std::ptrdiff_t>((c * k + ky) * k + kx) * hw;
                const int x0 = std::max(0, pad - kx);
                const int x1 = std::min(w, w + pad - kx);
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - pad;
                    if (sy < 0 || sy >= h) continue;
                    const T* src = row + y * w;
                    T* dst = chan + sy * w + kx - pad;
                    for (int x = x0; x < x1; ++x) dst[x] += src[x];
                }
            }
        }
    }
}

template <typename T>
void check_4d(const Tensor<T>& t, const char* what) {
    if (t.shape.size() != 4) throw std::invalid_argument(std::string(what) + ": expected a 4-d tensor");
}

}  // namespace

void ConvNetSpec::validate() const {
    if (num_layers < 1) throw std::invalid_argument("ConvNetSpec: num_layers must be >= 1");
    if (kernel_size < 1 || kernel_size % 2 == 0)
        throw std::invalid_argument("ConvNetSpec: kernel_size must be odd and >= 1");
    if (static_cast<int>(channels.size()) != num_layers)
        throw std::invalid_argument("ConvNetSpec: channels_per_layer must have num_layers entries");
    for (int c : channels)
        if (c < 1) throw std::invalid_argument("ConvNetSpec: channel counts must be positive");
    if (num_classes < 2) throw std::invalid_argument("ConvNetSpec: num_classes must be >= 2");
    if (feature_dim != channels.back())
        throw std::invalid_argument(
            "ConvNetSpec: feature_dim must equal the last layer's channel count (global average "
            "pooling width)");
    if (in_channels < 1 || in_h < 1 || in_w < 1)
        throw std::invalid_argument("ConvNetSpec: invalid input dimensions");
    int h = in_h, w = in_w;
    for (int l = 1; l <= num_layers; ++l) {
        if (pools_after(l)) {
            if (h % 2 != 0 || w % 2 != 0)
                throw std::invalid_argument("ConvNetSpec: 2x2 pooling after layer " +
                                            std::to_string(l) + " needs even spatial dims, got " +
                                            std::to_string(h) + "x" + std::to_string(w));
            h /= 2;
            w /= 2;
        }
    }
    for (int p : pool_after)
        if (p < 1 || p > num_layers)
            throw std::invalid_argument("ConvNetSpec: pool_after entry out of range");
}

bool ConvNetSpec::pools_after(int layer) const {
    return std::find(pool_after.begin(), pool_after.end(), layer) != pool_after.end();
}

std::pair<int, int> ConvNetSpec::spatial_at(int layer) const {
    int h = in_h, w = in_w;
    for (int l = 1; l < layer; ++l)
        if (pools_after(l)) {
            h /= 2;
            w /= 2;
        }
    return {h, w};
}

bool operator==(const ConvNetSpec& a, const ConvNetSpec& b) {
    return a.num_layers == b.num_layers && a.kernel_size == b.kernel_size &&
           a.channels == b.channels && a.num_classes == b.num_classes &&
           a.feature_dim == b.feature_dim && a.pool_after == b.pool_after &&
           a.in_channels == b.in_channels && a.in_h == b.in_h && a.in_w == b.in_w;
}

template <typename T>
void ModelParams<T>::for_each_param(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    // Convolution biases are omitted: every conv feeds a batch norm whose mean
    // subtraction cancels a per-channel shift, so their gradient is identically
    // zero. They stay in the type and in checkpoints.
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        fn("conv" + std::to_string(i + 1) + ".weight", blocks[i].weight);
        fn("bn" + std::to_string(i + 1) + ".gamma", blocks[i].bn_gamma);
        fn("bn" + std::to_string(i + 1) + ".beta", blocks[i].bn_beta);
    }
    fn("fc.weight", fc_weight);
    fn("fc.bias", fc_bias);
}

template <typename T>
void ModelParams<T>::for_each_param(
    const std::function<void(const std::string&, const Tensor<T>&)>& fn) const {
    const_cast<ModelParams<T>*>(this)->for_each_param(
        [&](const std::string& n, Tensor<T>& t) { fn(n, t); });
}

template <typename T>
void ModelParams<T>::for_each_tensor(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string c = "conv" + std::to_string(i + 1);
        const std::string b = "bn" + std::to_string(i + 1);
        fn(c + ".weight", blocks[i].weight);
        fn(c + ".bias", blocks[i].bias);
        fn(b + ".gamma", blocks[i].bn_gamma);
        fn(b + ".beta", blocks[i].bn_beta);
        fn(b + ".running_mean", blocks[i].bn_running_mean);
        fn(b + ".running_var", blocks[i].bn_running_var);
    }
    fn("fc.weight", fc_weight);
    fn("fc.bias", fc_bias);
}

template <typename T>
void ModelParams<T>::for_each_tensor(
    const std::function<void(const std::string&, const Tensor<T>&)>& fn) const {
    const_cast<ModelParams<T>*>(this)->for_each_tensor(
        [&](const std::string& n, Tensor<T>& t) { fn(n, t); });
}

template <typename T>
void ModelParams<T>::alloc_grads() {
    for_each_param([](const std::string&, Tensor<T>& t) { t.alloc_grad(); });
}

template <typename T>
void ModelParams<T>::zero_grads() {
    for_each_param([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
}

template <typename T>
std::int64_t ModelParams<T>::num_trainable() const {
    std::int64_t n = 0;
    for_each_param([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
}

template <typename T>
ModelParams<T> zero_params(const ConvNetSpec& spec) {
    spec.validate();
    ModelParams<T> p;
    int cin = spec.in_channels;
    const int kk = spec.kernel_size * spec.kernel_size;
    for (int l = 0; l < spec.num_layers; ++l) {
        const int cout = spec.channels[static_cast<std::size_t>(l)];
        ConvBlockParams<T> b;
        b.weight = Tensor<T>({cout, cin * kk});
        b.bias = Tensor<T>({cout});
        b.bn_gamma = Tensor<T>({cout});
        b.bn_beta = Tensor<T>({cout});
        b.bn_running_mean = Tensor<T>({cout});
        b.bn_running_var = Tensor<T>({cout});
        std::fill(b.bn_gamma.values.begin(), b.bn_gamma.values.end(), T(1));
        std::fill(b.bn_running_var.values.begin(), b.bn_running_var.values.end(), T(1));
        p.blocks.push_back(std::move(b));
        cin = cout;
    }
    p.fc_weight = Tensor<T>({spec.num_classes, spec.feature_dim});
    p.fc_bias = Tensor<T>({spec.num_classes});
    return p;
}

template <typename T>
ModelParams<T> init_params(const ConvNetSpec& spec, std::uint64_t seed) {
    ModelParams<T> p = zero_params<T>(spec);
    std::mt19937_64 rng = make_rng(seed);
    auto uniform = [&rng](double bound) {
        // 53-bit mantissa draw; avoids the implementation-defined distribution adaptors
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        return (2.0 * u - 1.0) * bound;
    };
    auto fill = [&](Tensor<T>& t, double bound) {
        for (auto& v : t.values) v = static_cast<T>(uniform(bound));
    };
    int cin = spec.in_channels;
    const int kk = spec.kernel_size * spec.kernel_size;
    for (int l = 0; l < spec.num_layers; ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin) * kk);
        fill(p.blocks[static_cast<std::size_t>(l)].weight, bound);
        fill(p.blocks[static_cast<std::size_t>(l)].bias, bound);
        cin = spec.channels[static_cast<std::size_t>(l)];
    }
    const double fc_bound = 1.0 / std::sqrt(static_cast<double>(spec.feature_dim));
    fill(p.fc_weight, fc_bound);
    fill(p.fc_bias, fc_bound);
    return p;
}

// --- convolution ---

template <typename T>
void conv2d_forward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias,
                    int kernel, Tensor<T>& out) {
    check_4d(in, "conv2d_forward");
    const int n = in.dim(0), cin = in.dim(1), h = in.dim(2), w = in.dim(3);
    const int hw = h * w;
    const int cout = weight.dim(0);
    const int kdim = cin * kernel * kernel;
    if (weight.dim(1) != kdim)
        throw std::invalid_argument("conv2d_forward: weight shape does not match input channels");
    out = Tensor<T>({n, cout, h, w});

#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        const T* sample = in.data() + static_cast<std::ptrdiff_t>(i) * cin * hw;
        const T* cols_ptr = sample;  // a 1x1 kernel needs no patch gather
        if (kernel > 1) {
            auto& cols = scratch_buffer<T>(0, static_cast<std::size_t>(kdim) * hw);
            im2col(sample, cin, h, w, kernel, cols.data());
            cols_ptr = cols.data();
        }
        ConstMatMap<T> wm(weight.data(), cout, kdim);
        ConstMatMap<T> cm(cols_ptr, kdim, hw);
        MatMap<T> om(out.data() + static_cast<std::ptrdiff_t>(i) * cout * hw, cout, hw);
        om.noalias() = wm * cm;
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(bias.data(), cout);
        om.colwise() += bv;
    }
}

template <typename T>
void conv2d_backward(const Tensor<T>& in, const Tensor<T>& weight, int kernel,
                     const Tensor<T>& dout, std::type_identity_t<Tensor<T>>* din,
                     std::type_identity_t<std::vector<T>>* dweight,
                     std::type_identity_t<std::vector<T>>* dbias) {
    const int n = in.dim(0), cin = in.dim(1), h = in.dim(2), w = in.dim(3);
    const int hw = h * w;
    const int cout = weight.dim(0);
    const int kdim = cin * kernel * kernel;

    if (din) {
        *din = Tensor<T>({n, cin, h, w});
#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i) {
            ConstMatMap<T> wm(weight.data(), cout, kdim);
            ConstMatMap<T> dym(dout.data() + static_cast<std::ptrdiff_t>(i) * cout * hw, cout, hw);
            if (kernel == 1) {
                MatMap<T> dm(din->data() + static_cast<std::ptrdiff_t>(i) * cin * hw, cin, hw);
                dm.noalias() = wm.transpose() * dym;
            } else {
                auto& dcols = scratch_buffer<T>(1, static_cast<std::size_t>(kdim) * hw);
                MatMap<T> dcm(dcols.data(), kdim, hw);
                dcm.noalias() = wm.transpose() * dym;
                col2im_add(dcols.data(), cin, h, w, kernel,
                           din->data() + static_cast<std::ptrdiff_t>(i) * cin * hw);
            }
        }
    }

    if (dweight) {
        dweight->assign(static_cast<std::size_t>(cout) * kdim, T(0));
        const int nchunks = (n + kDwChunk - 1) / kDwChunk;
        std::vector<std::vector<T>> partial(static_cast<std::size_t>(nchunks));
#pragma omp parallel for schedule(static)
        for (int ch = 0; ch < nchunks; ++ch) {
            auto& acc = partial[static_cast<std::size_t>(ch)];
            acc.assign(static_cast<std::size_t>(cout) * kdim, T(0));
            MatMap<T> am(acc.data(), cout, kdim);
            const int i1 = std::min(n, (ch + 1) * kDwChunk);
            for (int i = ch * kDwChunk; i < i1; ++i) {
                const T* sample = in.data() + static_cast<std::ptrdiff_t>(i) * cin * hw;
                const T* cols_ptr = sample;
                if (kernel > 1) {
                    auto& cols = scratch_buffer<T>(0, static_cast<std::size_t>(kdim) * hw);
                    im2col(sample, cin, h, w, kernel, cols.data());
                    cols_ptr = cols.data();
                }
                ConstMatMap<T> cm(cols_ptr, kdim, hw);
                ConstMatMap<T> dym(dout.data() + static_cast<std::ptrdiff_t>(i) * cout * hw, cout,
                                   hw);
                am.noalias() += dym * cm.transpose();
            }
        }
        for (int ch = 0; ch < nchunks; ++ch) {
            const auto& acc = partial[static_cast<std::size_t>(ch)];
            for (std::size_t j = 0; j < dweight->size(); ++j) (*dweight)[j] += acc[j];
        }
    }

    if (dbias) {
        dbias->assign(static_cast<std::size_t>(cout), T(0));
#pragma omp parallel for schedule(static)
        for (int co = 0; co < cout; ++co) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) {
                const T* row = dout.data() + (static_cast<std::ptrdiff_t>(i) * cout + co) * hw;
                for (int p = 0; p < hw; ++p) s += static_cast<double>(row[p]);
            }
            (*dbias)[static_cast<std::size_t>(co)] = static_cast<T>(s);
        }
    }
}

// --- batch normalization ---

namespace {

template <typename T>
struct BnTrainOut {
    std::vector<T> invstd;
    std::vector<T> new_mean, new_var;  // running statistics after the update
};

template <typename T>
BnTrainOut<T> batchnorm_train(const Tensor<T>& x, const ConvBlockParams<T>& bp, Tensor<T>& y,
                              Tensor<T>& xhat) {
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const std::int64_t m = static_cast<std::int64_t>(n) * hw;
    y = Tensor<T>(x.shape);
    xhat = Tensor<T>(x.shape);
    BnTrainOut<T> out;
    out.invstd.resize(static_cast<std::size_t>(c));
    out.new_mean.resize(static_cast<std::size_t>(c));
    out.new_var.resize(static_cast<std::size_t>(c));

#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
            const T* row = x.data() + (static_cast<std::ptrdiff_t>(i) * c + ch) * hw;
            for (int p = 0; p < hw; ++p) sum += static_cast<double>(row[p]);
        }
        const double mean = sum / static_cast<double>(m);
        double sq = 0.0;
        for (int i = 0; i < n; ++i) {
            const T* row = x.data() + (static_cast<std::ptrdiff_t>(i) * c + ch) * hw;
            for (int p = 0; p < hw; ++p) {
                const double d = static_cast<double>(row[p]) - mean;
                sq += d * d;
            }
        }
        const double var = sq / static_cast<double>(m);
        const double invstd = 1.0 / std::sqrt(var + kBnEps);
        const double g = static_cast<double>(bp.bn_gamma.values[static_cast<std::size_t>(ch)]);
        const double b = static_cast<double>(bp.bn_beta.values[static_cast<std::size_t>(ch)]);
        for (int i = 0; i < n; ++i) {
            const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(i) * c + ch) * hw;
            const T* row = x.data() + off;
            T* xh = xhat.data() + off;
            T* yr = y.data() + off;
            for (int p = 0; p < hw; ++p) {
                const double v = (static_cast<double>(row[p]) - mean) * invstd;
                xh[p] = static_cast<T>(v);
                yr[p] = static_cast<T>(g * v + b);
            }
        }
        out.invstd[static_cast<std::size_t>(ch)] = static_cast<T>(invstd);
        const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1)
                                      : var;
        const double rm =
            static_cast<double>(bp.bn_running_mean.values[static_cast<std::size_t>(ch)]);
        const double rv =
            static_cast<double>(bp.bn_running_var.values[static_cast<std::size_t>(ch)]);
        out.new_mean[static_cast<std::size_t>(ch)] =
            static_cast<T>((1.0 - kBnMomentum) * rm + kBnMomentum * mean);
        out.new_var[static_cast<std::size_t>(ch)] =
            static_cast<T>((1.0 - kBnMomentum) * rv + kBnMomentum * unbiased);
    }
    return out;
}

template <typename T>
void batchnorm_eval(const Tensor<T>& x, const ConvBlockParams<T>& bp, Tensor<T>& y) {
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    y = Tensor<T>(x.shape);
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
        const double g = static_cast<double>(bp.bn_gamma.values[static_cast<std::size_t>(ch)]);
        const double b = static_cast<double>(bp.bn_beta.values[static_cast<std::size_t>(ch)]);
        const double rm =
            static_cast<double>(bp.bn_running_mean.values[static_cast<std::size_t>(ch)]);
        const double rv =
            static_cast<double>(bp.bn_running_var.values[static_cast<std::size_t>(ch)]);
        const double scale = g / std::sqrt(rv + kBnEps);
        const double shift = b - rm * scale;
        for (int i = 0; i < n; ++i) {
            const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(i) * c + ch) * hw;
            const T* row = x.data() + off;
            T* yr = y.data() + off;
            for (int p = 0; p < hw; ++p)
                yr[p] = static_cast<T>(scale * static_cast<double>(row[p]) + shift);
        }
    }
}

template <typename T>
void batchnorm_backward(const Tensor<T>& xhat, const std::vector<T>& invstd,
                        const ConvBlockParams<T>& bp, const Tensor<T>& dy, Tensor<T>& dx,
                        std::vector<T>& dgamma, std::vector<T>& dbeta) {
    const int n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
    const double m = static_cast<double>(static_cast<std::int64_t>(n) * hw);
    dx = Tensor<T>(dy.shape);
    dgamma.assign(static_cast<std::size_t>(c), T(0));
    dbeta.assign(static_cast<std::size_t>(c), T(0));
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
        double s1 = 0.0, s2 = 0.0;
        for (int i = 0; i < n; ++i) {
            const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(i) * c + ch) * hw;
            const T* dr = dy.data() + off;
            const T* xh = xhat.data() + off;
            for (int p = 0; p < hw; ++p) {
                s1 += static_cast<double>(dr[p]);
                s2 += static_cast<double>(dr[p]) * static_cast<double>(xh[p]);
            }
        }
        dgamma[static_cast<std::size_t>(ch)] = static_cast<T>(s2);
        dbeta[static_cast<std::size_t>(ch)] = static_cast<T>(s1);
        const double g = static_cast<double>(bp.bn_gamma.values[static_cast<std::size_t>(ch)]);
        const double is = static_cast<double>(invstd[static_cast<std::size_t>(ch)]);
        const double k = g * is / m;
        for (int i = 0; i < n; ++i) {
            const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(i) * c + ch) * hw;
            const T* dr = dy.data() + off;
            const T* xh = xhat.data() + off;
            T* dxr = dx.data() + off;
            for (int p = 0; p < hw; ++p)
                dxr[p] = static_cast<T>(k * (m * static_cast<double>(dr[p]) - s1 -
                                             static_cast<double>(xh[p]) * s2));
        }
    }
}

template <typename T>
void relu_forward(const Tensor<T>& x, Tensor<T>& y) {
    y = Tensor<T>(x.shape);
    const std::int64_t sz = x.size();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < sz; ++i) y.values[i] = x.values[i] > T(0) ? x.values[i] : T(0);
}

template <typename T>
void relu_backward(const Tensor<T>& y, const Tensor<T>& dy, Tensor<T>& dx) {
    dx = Tensor<T>(dy.shape);
    const std::int64_t sz = dy.size();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < sz; ++i) dx.values[i] = y.values[i] > T(0) ? dy.values[i] : T(0);
}

template <typename T>
void avgpool2_forward(const Tensor<T>& x, Tensor<T>& y) {
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int oh = h / 2, ow = w / 2;
    y = Tensor<T>({n, c, oh, ow});
#pragma omp parallel for schedule(static)
    for (int ic = 0; ic < n * c; ++ic) {
        const T* src = x.data() + static_cast<std::ptrdiff_t>(ic) * h * w;
        T* dst = y.data() + static_cast<std::ptrdiff_t>(ic) * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                const T* p = src + (2 * oy) * w + 2 * ox;
                dst[oy * ow + ox] = static_cast<T>((static_cast<double>(p[0]) + p[1] + p[w] +
                                                    p[w + 1]) * 0.25);
            }
    }
}

template <typename T>
void avgpool2_backward(const Tensor<T>& dy, int h, int w, Tensor<T>& dx) {
    const int n = dy.dim(0), c = dy.dim(1), oh = dy.dim(2), ow = dy.dim(3);
    dx = Tensor<T>({n, c, h, w});
#pragma omp parallel for schedule(static)
    for (int ic = 0; ic < n * c; ++ic) {
        const T* src = dy.data() + static_cast<std::ptrdiff_t>(ic) * oh * ow;
        T* dst = dx.data() + static_cast<std::ptrdiff_t>(ic) * h * w;
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                const T g = static_cast<T>(static_cast<double>(src[oy * ow + ox]) * 0.25);
                T* p = dst + (2 * oy) * w + 2 * ox;
                p[0] = g;
                p[1] = g;
                p[w] = g;
                p[w + 1] = g;
            }
    }
}

template <typename T>
void gap_forward(const Tensor<T>& x, Tensor<T>& feats) {
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    feats = Tensor<T>({n, c});
#pragma omp parallel for schedule(static)
    for (int ic = 0; ic < n * c; ++ic) {
        const T* src = x.data() + static_cast<std::ptrdiff_t>(ic) * hw;
        long double s = 0.0L;  // high-precision accumulation keeps pooling order-insensitive
        for (int p = 0; p < hw; ++p) s += src[p];
        feats.values[static_cast<std::size_t>(ic)] =
            static_cast<T>(static_cast<double>(s) / hw);
    }
}

template <typename T>
void gap_backward(const Tensor<T>& dfeats, int h, int w, Tensor<T>& dx) {
    const int n = dfeats.dim(0), c = dfeats.dim(1), hw = h * w;
    dx = Tensor<T>({n, c, h, w});
#pragma omp parallel for schedule(static)
    for (int ic = 0; ic < n * c; ++ic) {
        const T g = static_cast<T>(static_cast<double>(dfeats.values[static_cast<std::size_t>(ic)]) / hw);
        T* dst = dx.data() + static_cast<std::ptrdiff_t>(ic) * hw;
        std::fill(dst, dst + hw, g);
    }
}

}  // namespace

template <typename T>
void linear_forward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias,
                    Tensor<T>& out) {
    const int n = in.dim(0), f = in.dim(1), o = weight.dim(0);
    if (weight.dim(1) != f) throw std::invalid_argument("linear_forward: shape mismatch");
    out = Tensor<T>({n, o});
    for (int i = 0; i < n; ++i) {
        const T* row = in.data() + static_cast<std::ptrdiff_t>(i) * f;
        for (int j = 0; j < o; ++j) {
            const T* wr = weight.data() + static_cast<std::ptrdiff_t>(j) * f;
            double s = static_cast<double>(bias.values[static_cast<std::size_t>(j)]);
            for (int c = 0; c < f; ++c) s += static_cast<double>(wr[c]) * row[c];
            out.values[static_cast<std::size_t>(i) * o + j] = static_cast<T>(s);
        }
    }
}

template <typename T>
void linear_backward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& dout,
                     std::type_identity_t<Tensor<T>>* din,
                     std::type_identity_t<std::vector<T>>* dweight,
                     std::type_identity_t<std::vector<T>>* dbias) {
    const int n = in.dim(0), f = in.dim(1), o = weight.dim(0);
    if (din) {
        *din = Tensor<T>({n, f});
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < f; ++c) {
                double s = 0.0;
                for (int j = 0; j < o; ++j)
                    s += static_cast<double>(dout.values[static_cast<std::size_t>(i) * o + j]) *
                         weight.values[static_cast<std::size_t>(j) * f + c];
                din->values[static_cast<std::size_t>(i) * f + c] = static_cast<T>(s);
            }
    }
    if (dweight) {
        dweight->assign(static_cast<std::size_t>(o) * f, T(0));
        for (int j = 0; j < o; ++j)
            for (int c = 0; c < f; ++c) {
                double s = 0.0;
                for (int i = 0; i < n; ++i)
                    s += static_cast<double>(dout.values[static_cast<std::size_t>(i) * o + j]) *
                         in.values[static_cast<std::size_t>(i) * f + c];
                (*dweight)[static_cast<std::size_t>(j) * f + c] = static_cast<T>(s);
            }
    }
    if (dbias) {
        dbias->assign(static_cast<std::size_t>(o), T(0));
        for (int j = 0; j < o; ++j) {
            double s = 0.0;
            for (int i = 0; i < n; ++i)
                s += static_cast<double>(dout.values[static_cast<std::size_t>(i) * o + j]);
            (*dbias)[static_cast<std::size_t>(j)] = static_cast<T>(s);
        }
    }
}

// --- full network ---

template <typename T>
ForwardResult<T> forward(const ConvNetSpec& spec, const ModelParams<T>& params,
                         const Tensor<T>& batch, Mode mode, ForwardCache<T>* cache) {
    spec.validate();
    if (batch.shape.size() != 4 || batch.dim(1) != spec.in_channels ||
        batch.dim(2) != spec.in_h || batch.dim(3) != spec.in_w || batch.dim(0) < 1) {
        std::ostringstream os;
        os << "forward: batch shape (";
        for (std::size_t i = 0; i < batch.shape.size(); ++i)
            os << (i ? "," : "") << batch.shape[i];
        os << ") does not match spec input (n," << spec.in_channels << "," << spec.in_h << ","
           << spec.in_w << ") with n >= 1";
        throw std::invalid_argument(os.str());
    }
    if (static_cast<int>(params.blocks.size()) != spec.num_layers)
        throw std::invalid_argument("forward: params do not match spec (layer count)");

    if (cache) {
        cache->input = batch;
        cache->blocks.assign(static_cast<std::size_t>(spec.num_layers), {});
        cache->mode = mode;
    }

    // `cur` tracks the live activation; cached tensors own it when a cache is
    // requested (out stays empty for layers without pooling — relu_out is the
    // next layer's input then).
    const Tensor<T>* cur = &batch;
    Tensor<T> holder;
    for (int l = 0; l < spec.num_layers; ++l) {
        const auto& bp = params.blocks[static_cast<std::size_t>(l)];
        Tensor<T> conv_out;
        conv2d_forward(*cur, bp.weight, bp.bias, spec.kernel_size, conv_out);
        Tensor<T> bn_out;
        Tensor<T> xhat;
        BnTrainOut<T> st;
        if (mode == Mode::Training) {
            st = batchnorm_train(conv_out, bp, bn_out, xhat);
        } else {
            batchnorm_eval(conv_out, bp, bn_out);
        }
        conv_out = Tensor<T>();
        Tensor<T> relu_out;
        relu_forward(bn_out, relu_out);
        bn_out = Tensor<T>();
        const bool pools = spec.pools_after(l + 1);
        Tensor<T> pooled;
        if (pools) avgpool2_forward(relu_out, pooled);
        if (cache) {
            auto& cb = cache->blocks[static_cast<std::size_t>(l)];
            if (mode == Mode::Training) {
                cb.xhat = std::move(xhat);
                cb.invstd = std::move(st.invstd);
                cb.new_running_mean = std::move(st.new_mean);
                cb.new_running_var = std::move(st.new_var);
            }
            cb.relu_out = std::move(relu_out);
            if (pools) cb.out = std::move(pooled);
            cur = pools ? &cb.out : &cb.relu_out;
        } else {
            holder = pools ? std::move(pooled) : std::move(relu_out);
            cur = &holder;
        }
    }

    ForwardResult<T> res;
    gap_forward(*cur, res.features);
    linear_forward(res.features, params.fc_weight, params.fc_bias, res.logits);
    if (cache) cache->features = res.features;
    return res;
}

template <typename T>
void backward(const ConvNetSpec& spec, ModelParams<T>& params, const ForwardCache<T>& cache,
              const Tensor<T>& dlogits, const Tensor<T>* dfeatures) {
    if (cache.mode != Mode::Training)
        throw std::logic_error("backward: requires a training-mode forward cache");
    if (static_cast<int>(cache.blocks.size()) != spec.num_layers)
        throw std::logic_error("backward: cache does not match spec");
    params.alloc_grads();

    Tensor<T> dfeat;
    std::vector<T> dw, db;
    linear_backward(cache.features, params.fc_weight, dlogits, &dfeat, &dw, &db);
    for (std::size_t j = 0; j < dw.size(); ++j) params.fc_weight.grad[j] += dw[j];
    for (std::size_t j = 0; j < db.size(); ++j) params.fc_bias.grad[j] += db[j];
    if (dfeatures) {
        if (dfeatures->shape != dfeat.shape)
            throw std::invalid_argument("backward: dfeatures shape mismatch");
        for (std::size_t j = 0; j < dfeat.values.size(); ++j)
            dfeat.values[j] += dfeatures->values[j];
    }

    auto block_out = [&](int l) -> const Tensor<T>& {
        const auto& cb = cache.blocks[static_cast<std::size_t>(l)];
        return spec.pools_after(l + 1) ? cb.out : cb.relu_out;
    };

    const auto& last = block_out(spec.num_layers - 1);
    Tensor<T> dact;
    gap_backward(dfeat, last.dim(2), last.dim(3), dact);

    for (int l = spec.num_layers - 1; l >= 0; --l) {
        auto& bp = params.blocks[static_cast<std::size_t>(l)];
        const auto& cb = cache.blocks[static_cast<std::size_t>(l)];
        Tensor<T> drelu;
        if (spec.pools_after(l + 1)) {
            avgpool2_backward(dact, cb.relu_out.dim(2), cb.relu_out.dim(3), drelu);
        } else {
            drelu = std::move(dact);
        }
        Tensor<T> dbn;
        relu_backward(cb.relu_out, drelu, dbn);
        drelu = Tensor<T>();
        Tensor<T> dconv;
        std::vector<T> dgamma, dbeta;
        batchnorm_backward(cb.xhat, cb.invstd, bp, dbn, dconv, dgamma, dbeta);
        dbn = Tensor<T>();
        for (std::size_t j = 0; j < dgamma.size(); ++j) bp.bn_gamma.grad[j] += dgamma[j];
        for (std::size_t j = 0; j < dbeta.size(); ++j) bp.bn_beta.grad[j] += dbeta[j];
        const Tensor<T>& in = l == 0 ? cache.input : block_out(l - 1);
        Tensor<T> din;
        conv2d_backward(in, bp.weight, spec.kernel_size, dconv, l > 0 ? &din : nullptr, &dw,
                        nullptr);  // conv bias is inert under the following batch norm
        for (std::size_t j = 0; j < dw.size(); ++j) bp.weight.grad[j] += dw[j];
        dact = std::move(din);
    }
}

template <typename T>
void commit_bn_updates(ModelParams<T>& params, const ForwardCache<T>& cache) {
    if (cache.mode != Mode::Training) return;
    for (std::size_t l = 0; l < params.blocks.size(); ++l) {
        const auto& cb = cache.blocks[l];
        if (cb.new_running_mean.empty()) continue;
        params.blocks[l].bn_running_mean.values = cb.new_running_mean;
        params.blocks[l].bn_running_var.values = cb.new_running_var;
    }
}

// --- cross entropy ---

template <typename T>
double cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    const int n = logits.dim(0), c = logits.dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("cross_entropy: label count mismatch");
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= c)
            throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                        " out of range [0," + std::to_string(c) + ")");
        const T* row = logits.data() + static_cast<std::ptrdiff_t>(i) * c;
        double mx = static_cast<double>(row[0]);
        for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double se = 0.0;
        for (int j = 0; j < c; ++j) se += std::exp(static_cast<double>(row[j]) - mx);
        total += mx + std::log(se) - static_cast<double>(row[y]);
    }
    return total / n;
}

template <typename T>
double cross_entropy_grad(const Tensor<T>& logits, const std::vector<int>& labels,
                          Tensor<T>& dlogits) {
    const int n = logits.dim(0), c = logits.dim(1);
    double loss = cross_entropy(logits, labels);
    dlogits = Tensor<T>({n, c});
    for (int i = 0; i < n; ++i) {
        const T* row = logits.data() + static_cast<std::ptrdiff_t>(i) * c;
        double mx = static_cast<double>(row[0]);
        for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double se = 0.0;
        for (int j = 0; j < c; ++j) se += std::exp(static_cast<double>(row[j]) - mx);
        for (int j = 0; j < c; ++j) {
            double p = std::exp(static_cast<double>(row[j]) - mx) / se;
            if (j == labels[static_cast<std::size_t>(i)]) p -= 1.0;
            dlogits.values[static_cast<std::size_t>(i) * c + j] = static_cast<T>(p / n);
        }
    }
    return loss;
}

// --- gradient check ---

GradCheckResult grad_check(ModelParams<double>& params, const LossProbe<double>& probe,
                           double epsilon, std::int64_t max_params, std::uint64_t seed) {
    if (epsilon < 1e-6 || epsilon > 1e-2)
        throw std::invalid_argument("grad_check: epsilon must be in [1e-6, 1e-2]");
    std::vector<Tensor<double>*> tensors;
    params.for_each_param([&](const std::string&, Tensor<double>& t) { tensors.push_back(&t); });
    std::vector<std::pair<int, std::int64_t>> slots;
    for (std::size_t ti = 0; ti < tensors.size(); ++ti)
        for (std::int64_t j = 0; j < tensors[ti]->size(); ++j)
            slots.emplace_back(static_cast<int>(ti), j);

    GradCheckResult res;
    if (slots.empty() || max_params <= 0) return res;

    std::mt19937_64 rng = make_rng(seed);
    const std::int64_t take = std::min<std::int64_t>(max_params, static_cast<std::int64_t>(slots.size()));
    for (std::int64_t i = 0; i < take; ++i) {
        const std::uint64_t span = slots.size() - static_cast<std::uint64_t>(i);
        const std::uint64_t j = static_cast<std::uint64_t>(i) + rng() % span;
        std::swap(slots[static_cast<std::size_t>(i)], slots[static_cast<std::size_t>(j)]);
    }

    probe(params, true);  // analytic gradients
    std::vector<double> analytic(static_cast<std::size_t>(take));
    for (std::int64_t i = 0; i < take; ++i) {
        auto [ti, j] = slots[static_cast<std::size_t>(i)];
        analytic[static_cast<std::size_t>(i)] = tensors[static_cast<std::size_t>(ti)]->grad[static_cast<std::size_t>(j)];
    }

    for (std::int64_t i = 0; i < take; ++i) {
        auto [ti, j] = slots[static_cast<std::size_t>(i)];
        double& slot = tensors[static_cast<std::size_t>(ti)]->values[static_cast<std::size_t>(j)];
        const double saved = slot;
        slot = saved + epsilon;
        const double lp = probe(params, false);
        slot = saved - epsilon;
        const double lm = probe(params, false);
        slot = saved;
        const double numeric = (lp - lm) / (2.0 * epsilon);
        const double a = analytic[static_cast<std::size_t>(i)];
        const double rel = std::abs(a - numeric) /
                           std::max({std::abs(a), std::abs(numeric), 1e-8});
        res.max_rel_error = std::max(res.max_rel_error, rel);
    }
    res.checked = take;
    return res;
}

// --- checkpoints ---

namespace {

constexpr char kCkptMagic[8] = {'R', 'B', 'L', 'C', 'K', 'P', 'T', '1'};

void put_i32(std::ostream& os, std::int32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

std::int32_t get_i32(std::istream& is, const std::string& path) {
    std::int32_t v;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw std::runtime_error("checkpoint " + path + ": truncated file");
    return v;
}

void put_ivec(std::ostream& os, const std::vector<int>& v) {
    put_u32(os, static_cast<std::uint32_t>(v.size()));
    for (int x : v) put_i32(os, x);
}

std::vector<int> get_ivec(std::istream& is, const std::string& path) {
    const auto n = static_cast<std::uint32_t>(get_i32(is, path));
    if (n > 1024) throw std::runtime_error("checkpoint " + path + ": corrupt list length");
    std::vector<int> v(n);
    for (auto& x : v) x = get_i32(is, path);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ConvNetSpec& spec,
                     const ModelParams<float>& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint " + path + ": cannot open for writing");
    os.write(kCkptMagic, 8);
    put_u32(os, 1);  // version
    put_i32(os, spec.num_layers);
    put_i32(os, spec.kernel_size);
    put_i32(os, spec.num_classes);
    put_i32(os, spec.feature_dim);
    put_i32(os, spec.in_channels);
    put_i32(os, spec.in_h);
    put_i32(os, spec.in_w);
    put_ivec(os, spec.channels);
    put_ivec(os, spec.pool_after);

    std::uint32_t count = 0;
    params.for_each_tensor([&](const std::string&, const Tensor<float>&) { ++count; });
    put_u32(os, count);
    params.for_each_tensor([&](const std::string& name, const Tensor<float>& t) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_ivec(os, t.shape);
        os.write(reinterpret_cast<const char*>(t.values.data()),
                 static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    });
    if (!os) throw std::runtime_error("checkpoint " + path + ": write failed");
}

void load_checkpoint(const std::string& path, ConvNetSpec& spec, ModelParams<float>& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint " + path + ": cannot open");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw std::runtime_error("checkpoint " + path + ": bad magic");
    const auto version = static_cast<std::uint32_t>(get_i32(is, path));
    if (version != 1)
        throw std::runtime_error("checkpoint " + path + ": unsupported version " +
                                 std::to_string(version));
    ConvNetSpec s;
    s.num_layers = get_i32(is, path);
    s.kernel_size = get_i32(is, path);
    s.num_classes = get_i32(is, path);
    s.feature_dim = get_i32(is, path);
    s.in_channels = get_i32(is, path);
    s.in_h = get_i32(is, path);
    s.in_w = get_i32(is, path);
    s.channels = get_ivec(is, path);
    s.pool_after = get_ivec(is, path);
    s.validate();

    ModelParams<float> p = zero_params<float>(s);
    const auto count = static_cast<std::uint32_t>(get_i32(is, path));
    std::uint32_t expected = 0;
    p.for_each_tensor([&](const std::string&, const Tensor<float>&) { ++expected; });
    if (count != expected)
        throw std::runtime_error("checkpoint " + path + ": tensor count mismatch");
    p.for_each_tensor([&](const std::string& name, Tensor<float>& t) {
        const auto len = static_cast<std::uint32_t>(get_i32(is, path));
        if (len > 256) throw std::runtime_error("checkpoint " + path + ": corrupt tensor name");
        std::string got(len, '\0');
        if (!is.read(got.data(), len))
            throw std::runtime_error("checkpoint " + path + ": truncated file");
        if (got != name)
            throw std::runtime_error("checkpoint " + path + ": unexpected tensor '" + got +
                                     "' (want '" + name + "')");
        const auto shape = get_ivec(is, path);
        if (shape != t.shape)
            throw std::runtime_error("checkpoint " + path + ": shape mismatch for " + name);
        if (!is.read(reinterpret_cast<char*>(t.values.data()),
                     static_cast<std::streamsize>(t.values.size() * sizeof(float))))
            throw std::runtime_error("checkpoint " + path + ": truncated tensor data");
    });
    spec = s;
    params = std::move(p);
}

// --- explicit instantiations ---

#define REBIAS_INSTANTIATE(T)                                                                      \
    template struct ModelParams<T>;                                                               \
    template ModelParams<T> init_params<T>(const ConvNetSpec&, std::uint64_t);                    \
    template ModelParams<T> zero_params<T>(const ConvNetSpec&);                                   \
    template ForwardResult<T> forward<T>(const ConvNetSpec&, const ModelParams<T>&,               \
                                         const Tensor<T>&, Mode, ForwardCache<T>*);               \
    template void backward<T>(const ConvNetSpec&, ModelParams<T>&, const ForwardCache<T>&,        \
                              const Tensor<T>&, const Tensor<T>*);                                \
    template void commit_bn_updates<T>(ModelParams<T>&, const ForwardCache<T>&);                  \
    template double cross_entropy<T>(const Tensor<T>&, const std::vector<int>&);                  \
    template double cross_entropy_grad<T>(const Tensor<T>&, const std::vector<int>&, Tensor<T>&); \
    template void conv2d_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,    \
                                    Tensor<T>&);                                                  \
    template void conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&, int, const Tensor<T>&,   \
                                     Tensor<T>*, std::vector<T>*, std::vector<T>*);                \
    template void linear_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                    Tensor<T>&);                                                  \
    template void linear_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                     Tensor<T>*, std::vector<T>*, std::vector<T>*);

REBIAS_INSTANTIATE(float)
REBIAS_INSTANTIATE(double)

#undef REBIAS_INSTANTIATE

}  // namespace rebias::nn
