#pragma once

#include <array>
#include <type_traits>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rebias/tensor.hpp"

namespace rebias::nn {

// Architecture of the fully convolutional classifier. The same description is
// used for the target net (7x7 kernels) and the texture-biased net (1x1).
struct ConvNetSpec {
    int num_layers = 4;
    int kernel_size = 7;                         // odd, >= 1
    std::vector<int> channels = {16, 32, 64, 128};  // one entry per layer
    int num_classes = 10;
    int feature_dim = 128;                       // width after global average pooling
    std::vector<int> pool_after = {2, 4};        // 1-based layers followed by 2x2 avg pool
    int in_channels = 3;
    int in_h = 28;
    int in_w = 28;

    void validate() const;                       // throws std::invalid_argument
    bool pools_after(int layer) const;           // layer is 1-based
    // spatial size seen by layer (1-based'); layer num_layers+1 gives the final map
    std::pair<int, int> spatial_at(int layer) const;
};

bool operator==(const ConvNetSpec& a, const ConvNetSpec& b);

template <typename T>
struct ConvBlockParams {
    Tensor<T> weight;        // (C_out, C_in * k * k)
    Tensor<T> bias;          // (C_out)
    Tensor<T> bn_gamma;      // (C_out)
    Tensor<T> bn_beta;       // (C_out)
    Tensor<T> bn_running_mean;  // (C_out), not trainable
    Tensor<T> bn_running_var;   // (C_out), not trainable, entries >= 0
};

template <typename T>
struct ModelParams {
    std::vector<ConvBlockParams<T>> blocks;
    Tensor<T> fc_weight;  // (num_classes, feature_dim)
    Tensor<T> fc_bias;    // (num_classes)

    // Trainable tensors in a fixed enumeration order (conv/bn per block, then fc).
    void for_each_param(const std::function<void(const std::string&, Tensor<T>&)>& fn);
    void for_each_param(const std::function<void(const std::string&, const Tensor<T>&)>& fn) const;
    // All tensors including batch-norm running statistics (checkpoint order).
    void for_each_tensor(const std::function<void(const std::string&, Tensor<T>&)>& fn);
    void for_each_tensor(const std::function<void(const std::string&, const Tensor<T>&)>& fn) const;

    void alloc_grads();
    void zero_grads();
    std::int64_t num_trainable() const;

    template <typename U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        for (const auto& b : blocks)
            out.blocks.push_back({b.weight.template cast<U>(), b.bias.template cast<U>(),
                                  b.bn_gamma.template cast<U>(), b.bn_beta.template cast<U>(),
                                  b.bn_running_mean.template cast<U>(),
                                  b.bn_running_var.template cast<U>()});
        out.fc_weight = fc_weight.template cast<U>();
        out.fc_bias = fc_bias.template cast<U>();
        return out;
    }
};

// Fan-in scaled uniform initialization, deterministic in the seed.
template <typename T>
ModelParams<T> init_params(const ConvNetSpec& spec, std::uint64_t seed);
template <typename T>
ModelParams<T> zero_params(const ConvNetSpec& spec);

template <typename T>
struct ForwardResult {
    Tensor<T> features;  // (n, feature_dim), post global average pooling
    Tensor<T> logits;    // (n, num_classes)
};

enum class Mode { Training, Eval };

// Intermediates kept for the backward pass. Running-statistic updates are
// staged here and only applied via commit_bn_updates, keeping forward() pure.
template <typename T>
struct ForwardCache {
    Tensor<T> input;
    struct Block {
        Tensor<T> xhat;      // normalized conv output (training mode)
        std::vector<T> invstd;
        Tensor<T> relu_out;  // pre-pool activation
        Tensor<T> out;       // block output (post-pool when the layer pools)
        std::vector<T> new_running_mean, new_running_var;
    };
    std::vector<Block> blocks;
    Tensor<T> features;
    Mode mode = Mode::Training;
};

template <typename T>
ForwardResult<T> forward(const ConvNetSpec& spec, const ModelParams<T>& params,
                         const Tensor<T>& batch, Mode mode, ForwardCache<T>* cache = nullptr);

// Reverse pass. dlogits is (n, num_classes); dfeatures (n, feature_dim) is an
// optional extra gradient injected at the pooled features (HSIC couplings).
// Accumulates into each parameter tensor's grad buffer.
template <typename T>
void backward(const ConvNetSpec& spec, ModelParams<T>& params, const ForwardCache<T>& cache,
              const Tensor<T>& dlogits, const Tensor<T>* dfeatures = nullptr);

template <typename T>
void commit_bn_updates(ModelParams<T>& params, const ForwardCache<T>& cache);

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
double cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels);
template <typename T>
double cross_entropy_grad(const Tensor<T>& logits, const std::vector<int>& labels,
                          Tensor<T>& dlogits);

// --- layer primitives (exposed for unit tests) ---
template <typename T>
void conv2d_forward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias,
                    int kernel, Tensor<T>& out);
template <typename T>
void conv2d_backward(const Tensor<T>& in, const Tensor<T>& weight, int kernel,
                     const Tensor<T>& dout, std::type_identity_t<Tensor<T>>* din,
                     std::type_identity_t<std::vector<T>>* dweight,
                     std::type_identity_t<std::vector<T>>* dbias);
template <typename T>
void linear_forward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias,
                    Tensor<T>& out);
template <typename T>
void linear_backward(const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& dout,
                     std::type_identity_t<Tensor<T>>* din,
                     std::type_identity_t<std::vector<T>>* dweight,
                     std::type_identity_t<std::vector<T>>* dbias);

// --- gradient checking ---

// A differentiable scalar loss over one parameter set (the second network, if
// any, is captured inside and held fixed). want_grad fills params' grad buffers.
template <typename T>
using LossProbe = std::function<double(ModelParams<T>& params, bool want_grad)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::int64_t checked = 0;
};

// Central finite differences on a random subsample of at least `max_params`
// scalar parameters (all of them when fewer exist). 64-bit evaluation.
GradCheckResult grad_check(ModelParams<double>& params, const LossProbe<double>& probe,
                           double epsilon, std::int64_t max_params, std::uint64_t seed);

// --- checkpoints ---
void save_checkpoint(const std::string& path, const ConvNetSpec& spec,
                     const ModelParams<float>& params);
void load_checkpoint(const std::string& path, ConvNetSpec& spec, ModelParams<float>& params);

}  // namespace rebias::nn
