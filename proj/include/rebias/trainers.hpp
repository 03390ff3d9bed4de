#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rebias/biasgen.hpp"
#include "rebias/convnet.hpp"
#include "rebias/hsic.hpp"
#include "rebias/tensor.hpp"

namespace rebias::train {

enum class Kind { Vanilla, Biased, Rubi, Rebias };

const char* kind_name(Kind k);
Kind kind_from_name(const std::string& name);

struct TrainerConfig {
    Kind kind = Kind::Vanilla;
    int epochs = 80;
    int batch_size = 256;
    double base_lr = 1e-3;
    double lr_decay_factor = 0.1;
    int lr_decay_period = 20;
    double lambda_f = 1.0;  // weight of the HSIC penalty in f's loss
    double lambda_g = 1.0;  // weight of the HSIC reward in g's loss
    int grad_accum_steps = 1;
    std::uint64_t seed = 1;
    hsic::KernelConfig kernel;
    double explosion_threshold = 1e4;
    double weight_decay = 0.0;
    bool hsic_on_logits = false;        // default: pooled features
    bool g_eval_in_f_step = true;       // g uses running statistics during f's update
    bool g_step_uses_updated_f = true;  // g's HSIC term sees f's post-update features
    std::int64_t inject_nan_step = -1;  // test hook: poison one gradient at this update

    void validate() const;
};

// Adam with bias-corrected moments and optional decoupled weight decay.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::int64_t step = 0;
    std::vector<std::vector<float>> m, v;  // aligned with the trainable-tensor order

    void init(const nn::ModelParams<float>& params);
};

void adam_update(nn::ModelParams<float>& params, AdamState& state, double lr);

// base_lr * factor^(epoch/period); dividing by the inverse factor keeps the
// default decimal steps exact (1e-3, 1e-4, ...).
double lr_schedule(double base_lr, double factor, int period, int epoch);

struct GradNorm {
    double norm = 0.0;
    bool exploded = false;
};

// Global L2 norm over all gradient buffers; exploded on non-finite values or
// norm strictly above the threshold.
GradNorm grad_norm_monitor(const nn::ModelParams<float>& params, double threshold);

struct StepMetrics {
    double loss_f = std::nan("");
    double loss_g = std::nan("");
    double hsic_f = std::nan("");  // value used in f's loss
    double hsic_g = std::nan("");  // value used in g's loss
    double grad_norm_f = std::nan("");
    double grad_norm_g = std::nan("");
    bool exploded = false;
};

struct RebiasStepOptions {
    double lr = 1e-3;
    double lambda_f = 1.0;
    double lambda_g = 1.0;
    double sigma_f = 1.0;
    double sigma_g = 1.0;
    bool hsic_on_logits = false;
    bool g_eval_in_f_step = true;
    bool g_step_uses_updated_f = true;
    double explosion_threshold = 1e4;
    // optional capture of the features entering the f-step HSIC term
    nn::Tensor<float>* capture_features_f = nullptr;
    nn::Tensor<float>* capture_features_g = nullptr;
};

// One optimizer update per call. Each records the pre-update loss.
StepMetrics train_step_vanilla(const nn::ConvNetSpec& spec, nn::ModelParams<float>& params,
                               AdamState& opt, const nn::Tensor<float>& batch,
                               const std::vector<int>& labels, double lr,
                               double explosion_threshold);
StepMetrics train_step_biased(const nn::ConvNetSpec& spec, nn::ModelParams<float>& params,
                              AdamState& opt, const nn::Tensor<float>& batch,
                              const std::vector<int>& labels, double lr,
                              double explosion_threshold);
StepMetrics train_step_rebias(const nn::ConvNetSpec& f_spec, nn::ModelParams<float>& f,
                              AdamState& opt_f, const nn::ConvNetSpec& g_spec,
                              nn::ModelParams<float>& g, AdamState& opt_g,
                              const nn::Tensor<float>& batch, const std::vector<int>& labels,
                              const RebiasStepOptions& opts);
StepMetrics train_step_rubi(const nn::ConvNetSpec& f_spec, nn::ModelParams<float>& f,
                            AdamState& opt_f, const nn::ConvNetSpec& g_spec,
                            nn::ModelParams<float>& g, AdamState& opt_g,
                            const nn::Tensor<float>& batch, const std::vector<int>& labels,
                            double lr, double explosion_threshold);

// Sums gradients over k micro-batches, divides by k, applies one Adam step.
// compute(j) accumulates micro-batch j's gradients into params and returns its
// loss. Equivalent to one large batch only for batch-decoupled losses.
StepMetrics accumulate_gradients(nn::ModelParams<float>& params, AdamState& opt, int k,
                                 const std::function<double(int)>& compute, double lr,
                                 double explosion_threshold);

struct EpochMetrics {
    int epoch = 0;
    double lr = 0.0;
    double loss_f = std::nan("");
    double loss_g = std::nan("");
    double hsic = std::nan("");  // f-step HSIC, averaged over the epoch
    double grad_norm_f = std::nan("");
    double grad_norm_g = std::nan("");
    bool diverged = false;
};

// Features entering the HSIC term on the first update of an epoch, kept so the
// reported value can be recomputed independently.
struct LoggedHsicStep {
    int epoch = 0;
    nn::Tensor<float> features_f, features_g;
    double sigma_f = 1.0, sigma_g = 1.0;
    double hsic = 0.0;
};

struct RunState {
    std::vector<EpochMetrics> history;
    bool diverged = false;
    int divergence_epoch = -1;
    std::vector<LoggedHsicStep> logged_hsic;
    double sigma_f = 1.0, sigma_g = 1.0;  // last values in effect
};

struct TrainResult {
    nn::ConvNetSpec spec_f, spec_g;
    nn::ModelParams<float> params_f, params_g;
    bool has_f = false, has_g = false;
    RunState state;
};

// Full training loop: shared per-epoch data order derived from (seed, epoch),
// step-decay schedule, optional gradient accumulation, divergence monitoring.
TrainResult run_training(const TrainerConfig& cfg, const nn::ConvNetSpec& f_spec,
                         const nn::ConvNetSpec& g_spec, const data::BiasedDataset& dataset,
                         const std::function<void(const EpochMetrics&)>& on_epoch = nullptr);

// Deterministic shuffled index order shared by all trainers for an epoch.
std::vector<int> epoch_order(std::uint64_t seed, int epoch, int n);

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);
std::vector<EpochMetrics> parse_metrics_csv(const std::string& text);

}  // namespace rebias::train
