#include "rebias/trainers.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace rebias::train {

namespace {

constexpr std::uint64_t kSeedF = 0xF00DF00DULL;
constexpr std::uint64_t kSeedG = 0xB1A5EDULL;
constexpr std::uint64_t kSeedOrder = 0x0BDEBULL;
constexpr std::uint64_t kSeedSigma = 0x516AULL;

}  // namespace

const char* kind_name(Kind k) {
    switch (k) {
        case Kind::Vanilla: return "vanilla";
        case Kind::Biased: return "biased";
        case Kind::Rubi: return "rubi";
        case Kind::Rebias: return "rebias";
    }
    return "?";
}

Kind kind_from_name(const std::string& name) {
    if (name == "vanilla") return Kind::Vanilla;
    if (name == "biased") return Kind::Biased;
    if (name == "rubi") return Kind::Rubi;
    if (name == "rebias") return Kind::Rebias;
    throw std::invalid_argument("unknown trainer kind '" + name +
                                "' (want vanilla|biased|rubi|rebias)");
}

void TrainerConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("TrainerConfig: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainerConfig: batch_size must be >= 1");
    if (kind == Kind::Rebias && batch_size < 4)
        throw std::invalid_argument(
            "TrainerConfig: rebias needs batch_size >= 4 (unbiased HSIC estimator)");
    if (lambda_f < 0.0 || lambda_g < 0.0)
        throw std::invalid_argument("TrainerConfig: lambda weights must be >= 0");
    if (grad_accum_steps < 1)
        throw std::invalid_argument("TrainerConfig: grad_accum_steps must be >= 1");
    if (base_lr <= 0.0) throw std::invalid_argument("TrainerConfig: base_lr must be > 0");
    if (lr_decay_factor <= 0.0 || lr_decay_factor > 1.0)
        throw std::invalid_argument("TrainerConfig: lr_decay_factor must be in (0,1]");
    if (lr_decay_period < 1)
        throw std::invalid_argument("TrainerConfig: lr_decay_period must be >= 1");
    if (explosion_threshold <= 0.0)
        throw std::invalid_argument("TrainerConfig: explosion_threshold must be > 0");
    if (weight_decay < 0.0) throw std::invalid_argument("TrainerConfig: weight_decay must be >= 0");
    kernel.validate();
}

void AdamState::init(const nn::ModelParams<float>& params) {
    m.clear();
    v.clear();
    step = 0;
    params.for_each_param([&](const std::string&, const nn::Tensor<float>& t) {
        m.emplace_back(static_cast<std::size_t>(t.size()), 0.0f);
        v.emplace_back(static_cast<std::size_t>(t.size()), 0.0f);
    });
}

void adam_update(nn::ModelParams<float>& params, AdamState& st, double lr) {
    if (st.m.empty()) st.init(params);
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    std::size_t idx = 0;
    params.for_each_param([&](const std::string&, nn::Tensor<float>& t) {
        auto& m = st.m[idx];
        auto& v = st.v[idx];
        ++idx;
        if (t.grad.empty()) t.zero_grad();
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            const double g = static_cast<double>(t.grad[i]);
            const double mm = st.beta1 * m[i] + (1.0 - st.beta1) * g;
            const double vv = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
            m[i] = static_cast<float>(mm);
            v[i] = static_cast<float>(vv);
            const double mhat = mm / bc1;
            const double vhat = vv / bc2;
            const double upd =
                lr * (mhat / (std::sqrt(vhat) + st.eps) + st.weight_decay * t.values[i]);
            t.values[i] = static_cast<float>(static_cast<double>(t.values[i]) - upd);
        }
    });
}

double lr_schedule(double base_lr, double factor, int period, int epoch) {
    if (epoch < 0) throw std::invalid_argument("lr_schedule: epoch must be >= 0");
    if (period < 1) throw std::invalid_argument("lr_schedule: period must be >= 1");
    if (factor <= 0.0) throw std::invalid_argument("lr_schedule: factor must be > 0");
    const int k = epoch / period;
    return base_lr / std::pow(1.0 / factor, static_cast<double>(k));
}

GradNorm grad_norm_monitor(const nn::ModelParams<float>& params, double threshold) {
    GradNorm out;
    double ss = 0.0;
    params.for_each_param([&](const std::string&, const nn::Tensor<float>& t) {
        for (float g : t.grad) {
            if (!std::isfinite(g)) out.exploded = true;
            ss += static_cast<double>(g) * g;
        }
    });
    out.norm = std::sqrt(ss);
    if (!std::isfinite(out.norm) || out.norm > threshold) out.exploded = true;
    return out;
}

namespace {

// Cross-entropy gradients for one network; accumulates into .grad and commits
// the batch-norm running statistics of this forward.
double ce_grads(const nn::ConvNetSpec& spec, nn::ModelParams<float>& params,
                const nn::Tensor<float>& batch, const std::vector<int>& labels) {
    nn::ForwardCache<float> cache;
    const auto res = nn::forward(spec, params, batch, nn::Mode::Training, &cache);
    nn::Tensor<float> dlogits;
    const double loss = nn::cross_entropy_grad(res.logits, labels, dlogits);
    nn::backward(spec, params, cache, dlogits);
    nn::commit_bn_updates(params, cache);
    return loss;
}

struct CoupledOut {
    double ce = 0.0;
    double hsic = std::nan("");
};

// f's half of the min-max update: CE plus lambda * HSIC1(f(x), g(x)) with g held fixed.
CoupledOut rebias_f_grads(const nn::ConvNetSpec& f_spec, nn::ModelParams<float>& f,
                          const nn::ConvNetSpec& g_spec, const nn::ModelParams<float>& g,
                          const nn::Tensor<float>& batch, const std::vector<int>& labels,
                          const RebiasStepOptions& o) {
    if (o.lambda_f == 0.0) return {ce_grads(f_spec, f, batch, labels), std::nan("")};

    nn::ForwardCache<float> cache;
    const auto rf = nn::forward(f_spec, f, batch, nn::Mode::Training, &cache);
    const auto rg = nn::forward(g_spec, g, batch,
                                o.g_eval_in_f_step ? nn::Mode::Eval : nn::Mode::Training);
    const nn::Tensor<float>& U = o.hsic_on_logits ? rf.logits : rf.features;
    const nn::Tensor<float>& V = o.hsic_on_logits ? rg.logits : rg.features;

    nn::Tensor<float> dU;
    const double h = hsic::hsic_value_grad(hsic::Estimator::Unbiased, U, o.sigma_f, V, o.sigma_g,
                                           &dU, nullptr);
    if (o.capture_features_f) *o.capture_features_f = U;
    if (o.capture_features_g) *o.capture_features_g = V;

    nn::Tensor<float> dlogits;
    const double ce = nn::cross_entropy_grad(rf.logits, labels, dlogits);
    for (auto& v : dU.values) v = static_cast<float>(o.lambda_f * v);
    if (o.hsic_on_logits) {
        for (std::size_t i = 0; i < dlogits.values.size(); ++i) dlogits.values[i] += dU.values[i];
        nn::backward(f_spec, f, cache, dlogits);
    } else {
        nn::backward(f_spec, f, cache, dlogits, &dU);
    }
    nn::commit_bn_updates(f, cache);
    return {ce, h};
}

// g's half: CE minus lambda_g * HSIC1(f(x), g(x)) with f held fixed.
CoupledOut rebias_g_grads(const nn::ConvNetSpec& f_spec, const nn::ModelParams<float>& f,
                          const nn::ConvNetSpec& g_spec, nn::ModelParams<float>& g,
                          const nn::Tensor<float>& batch, const std::vector<int>& labels,
                          const RebiasStepOptions& o, const nn::Tensor<float>* f_side_pre) {
    if (o.lambda_g == 0.0) return {ce_grads(g_spec, g, batch, labels), std::nan("")};

    nn::ForwardCache<float> cache;
    const auto rg = nn::forward(g_spec, g, batch, nn::Mode::Training, &cache);
    nn::Tensor<float> f_side;
    if (o.g_step_uses_updated_f || f_side_pre == nullptr) {
        const auto rf = nn::forward(f_spec, f, batch, nn::Mode::Eval);
        f_side = o.hsic_on_logits ? rf.logits : rf.features;
    } else {
        f_side = *f_side_pre;
    }
    const nn::Tensor<float>& V = o.hsic_on_logits ? rg.logits : rg.features;

    nn::Tensor<float> dV;
    const double h = hsic::hsic_value_grad(hsic::Estimator::Unbiased, f_side, o.sigma_f, V,
                                           o.sigma_g, nullptr, &dV);
    nn::Tensor<float> dlogits;
    const double ce = nn::cross_entropy_grad(rg.logits, labels, dlogits);
    for (auto& v : dV.values) v = static_cast<float>(-o.lambda_g * v);
    if (o.hsic_on_logits) {
        for (std::size_t i = 0; i < dlogits.values.size(); ++i) dlogits.values[i] += dV.values[i];
        nn::backward(g_spec, g, cache, dlogits);
    } else {
        nn::backward(g_spec, g, cache, dlogits, &dV);
    }
    nn::commit_bn_updates(g, cache);
    return {ce, h};
}

// f's RUBi update: cross-entropy on f's logits gated elementwise by
// sigmoid(g's logits); no gradient reaches g through the mask.
double rubi_f_grads(const nn::ConvNetSpec& f_spec, nn::ModelParams<float>& f,
                    const nn::Tensor<float>& g_logits, const nn::Tensor<float>& batch,
                    const std::vector<int>& labels) {
    nn::ForwardCache<float> cache;
    const auto rf = nn::forward(f_spec, f, batch, nn::Mode::Training, &cache);
    nn::Tensor<float> mask(g_logits.shape);
    for (std::size_t i = 0; i < mask.values.size(); ++i)
        mask.values[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(
                                                       g_logits.values[i]))));
    nn::Tensor<float> masked(rf.logits.shape);
    for (std::size_t i = 0; i < masked.values.size(); ++i)
        masked.values[i] = rf.logits.values[i] * mask.values[i];
    nn::Tensor<float> dmasked;
    const double loss = nn::cross_entropy_grad(masked, labels, dmasked);
    nn::Tensor<float> dlogits(dmasked.shape);
    for (std::size_t i = 0; i < dlogits.values.size(); ++i)
        dlogits.values[i] = dmasked.values[i] * mask.values[i];
    nn::backward(f_spec, f, cache, dlogits);
    nn::commit_bn_updates(f, cache);
    return loss;
}

struct AccumOut {
    double mean_loss = std::nan("");
    double mean_hsic = std::nan("");
    double norm = std::nan("");
    bool exploded = false;
};

// compute(j) accumulates micro-batch j's gradients and returns {ce, hsic}.
AccumOut accum_step(nn::ModelParams<float>& params, AdamState& opt, int k,
                    const std::function<CoupledOut(int)>& compute, double lr, double threshold,
                    bool poison) {
    if (k < 1) throw std::invalid_argument("gradient accumulation needs k >= 1");
    params.zero_grads();
    AccumOut out;
    double loss_sum = 0.0, hsic_sum = 0.0;
    int hsic_count = 0;
    for (int j = 0; j < k; ++j) {
        const CoupledOut c = compute(j);
        loss_sum += c.ce;
        if (!std::isnan(c.hsic)) {
            hsic_sum += c.hsic;
            ++hsic_count;
        }
    }
    if (k > 1) {
        const float inv = 1.0f / static_cast<float>(k);
        params.for_each_param([&](const std::string&, nn::Tensor<float>& t) {
            for (auto& g : t.grad) g *= inv;
        });
    }
    if (poison) {
        bool done = false;
        params.for_each_param([&](const std::string&, nn::Tensor<float>& t) {
            if (!done && !t.grad.empty()) {
                t.grad[0] = std::nanf("");
                done = true;
            }
        });
    }
    out.mean_loss = loss_sum / k;
    if (hsic_count > 0) out.mean_hsic = hsic_sum / hsic_count;
    const GradNorm gn = grad_norm_monitor(params, threshold);
    out.norm = gn.norm;
    out.exploded = gn.exploded;
    if (!std::isfinite(out.mean_loss)) out.exploded = true;
    if (!out.exploded) adam_update(params, opt, lr);
    return out;
}

}  // namespace

StepMetrics accumulate_gradients(nn::ModelParams<float>& params, AdamState& opt, int k,
                                 const std::function<double(int)>& compute, double lr,
                                 double explosion_threshold) {
    const AccumOut a = accum_step(
        params, opt, k, [&](int j) { return CoupledOut{compute(j), std::nan("")}; }, lr,
        explosion_threshold, false);
    StepMetrics m;
    m.loss_f = a.mean_loss;
    m.grad_norm_f = a.norm;
    m.exploded = a.exploded;
    return m;
}

StepMetrics train_step_vanilla(const nn::ConvNetSpec& spec, nn::ModelParams<float>& params,
                               AdamState& opt, const nn::Tensor<float>& batch,
                               const std::vector<int>& labels, double lr,
                               double explosion_threshold) {
    const AccumOut a = accum_step(
        params, opt, 1,
        [&](int) { return CoupledOut{ce_grads(spec, params, batch, labels), std::nan("")}; }, lr,
        explosion_threshold, false);
    StepMetrics m;
    m.loss_f = a.mean_loss;
    m.grad_norm_f = a.norm;
    m.exploded = a.exploded;
    return m;
}

StepMetrics train_step_biased(const nn::ConvNetSpec& spec, nn::ModelParams<float>& params,
                              AdamState& opt, const nn::Tensor<float>& batch,
                              const std::vector<int>& labels, double lr,
                              double explosion_threshold) {
    const AccumOut a = accum_step(
        params, opt, 1,
        [&](int) { return CoupledOut{ce_grads(spec, params, batch, labels), std::nan("")}; }, lr,
        explosion_threshold, false);
    StepMetrics m;
    m.loss_g = a.mean_loss;
    m.grad_norm_g = a.norm;
    m.exploded = a.exploded;
    return m;
}

StepMetrics train_step_rebias(const nn::ConvNetSpec& f_spec, nn::ModelParams<float>& f,
                              AdamState& opt_f, const nn::ConvNetSpec& g_spec,
                              nn::ModelParams<float>& g, AdamState& opt_g,
                              const nn::Tensor<float>& batch, const std::vector<int>& labels,
                              const RebiasStepOptions& o) {
    if (batch.dim(0) < 4)
        throw std::invalid_argument("train_step_rebias: batch must have at least 4 samples");
    StepMetrics m;
    nn::Tensor<float> f_side_pre;
    RebiasStepOptions fo = o;
    if (!o.g_step_uses_updated_f && fo.capture_features_f == nullptr)
        fo.capture_features_f = &f_side_pre;
    const AccumOut af = accum_step(
        f, opt_f, 1,
        [&](int) {
            const CoupledOut c = rebias_f_grads(f_spec, f, g_spec, g, batch, labels, fo);
            return c;
        },
        o.lr, o.explosion_threshold, false);
    m.loss_f = af.mean_loss;
    m.hsic_f = af.mean_hsic;
    m.grad_norm_f = af.norm;
    if (af.exploded) {
        m.exploded = true;
        return m;
    }
    const nn::Tensor<float>* pre =
        fo.capture_features_f && fo.capture_features_f->size() > 0 ? fo.capture_features_f
                                                                   : nullptr;
    const AccumOut ag = accum_step(
        g, opt_g, 1,
        [&](int) { return rebias_g_grads(f_spec, f, g_spec, g, batch, labels, o, pre); }, o.lr,
        o.explosion_threshold, false);
    m.loss_g = ag.mean_loss;
    m.hsic_g = ag.mean_hsic;
    m.grad_norm_g = ag.norm;
    m.exploded = ag.exploded;
    return m;
}

StepMetrics train_step_rubi(const nn::ConvNetSpec& f_spec, nn::ModelParams<float>& f,
                            AdamState& opt_f, const nn::ConvNetSpec& g_spec,
                            nn::ModelParams<float>& g, AdamState& opt_g,
                            const nn::Tensor<float>& batch, const std::vector<int>& labels,
                            double lr, double explosion_threshold) {
    StepMetrics m;
    const auto rg = nn::forward(g_spec, g, batch, nn::Mode::Training);
    const AccumOut af = accum_step(
        f, opt_f, 1,
        [&](int) {
            return CoupledOut{rubi_f_grads(f_spec, f, rg.logits, batch, labels), std::nan("")};
        },
        lr, explosion_threshold, false);
    m.loss_f = af.mean_loss;
    m.grad_norm_f = af.norm;
    if (af.exploded) {
        m.exploded = true;
        return m;
    }
    const AccumOut ag = accum_step(
        g, opt_g, 1,
        [&](int) { return CoupledOut{ce_grads(g_spec, g, batch, labels), std::nan("")}; }, lr,
        explosion_threshold, false);
    m.loss_g = ag.mean_loss;
    m.grad_norm_g = ag.norm;
    m.exploded = ag.exploded;
    return m;
}

std::vector<int> epoch_order(std::uint64_t seed, int epoch, int n) {
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    auto rng = nn::make_rng(nn::mix_seed(seed, kSeedOrder, static_cast<std::uint64_t>(epoch)));
    for (int i = n - 1; i > 0; --i) {
        const auto j = static_cast<std::size_t>(rng() % static_cast<std::uint64_t>(i + 1));
        std::swap(order[static_cast<std::size_t>(i)], order[j]);
    }
    return order;
}

TrainResult run_training(const TrainerConfig& cfg, const nn::ConvNetSpec& f_spec,
                         const nn::ConvNetSpec& g_spec, const data::BiasedDataset& dataset,
                         const std::function<void(const EpochMetrics&)>& on_epoch) {
    cfg.validate();
    const bool needs_f = cfg.kind != Kind::Biased;
    const bool needs_g = cfg.kind != Kind::Vanilla;
    if (needs_f) f_spec.validate();
    if (needs_g) g_spec.validate();
    const int n = static_cast<int>(dataset.samples.size());
    if (n < 4) throw std::invalid_argument("run_training: dataset must have at least 4 samples");

    TrainResult out;
    out.spec_f = f_spec;
    out.spec_g = g_spec;
    if (needs_f) {
        out.params_f = nn::init_params<float>(f_spec, nn::mix_seed(cfg.seed, kSeedF));
        out.has_f = true;
    }
    if (needs_g) {
        out.params_g = nn::init_params<float>(g_spec, nn::mix_seed(cfg.seed, kSeedG));
        out.has_g = true;
    }
    AdamState opt_f, opt_g;
    opt_f.weight_decay = cfg.weight_decay;
    opt_g.weight_decay = cfg.weight_decay;

    double sigma_f = cfg.kernel.sigma;
    double sigma_g = cfg.kernel.sigma;
    std::int64_t update_counter = 0;

    for (int epoch = 0; epoch < cfg.epochs && !out.state.diverged; ++epoch) {
        const double lr =
            lr_schedule(cfg.base_lr, cfg.lr_decay_factor, cfg.lr_decay_period, epoch);

        if (cfg.kind == Kind::Rebias &&
            cfg.kernel.strategy == hsic::KernelConfig::Strategy::MedianHeuristic &&
            cfg.lambda_f + cfg.lambda_g > 0.0) {
            auto rng = nn::make_rng(
                nn::mix_seed(cfg.seed, kSeedSigma, static_cast<std::uint64_t>(epoch)));
            const int m = std::max(2, static_cast<int>(std::ceil(cfg.kernel.sample_fraction * n)));
            std::vector<int> idx(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
            for (int i = 0; i < m; ++i) {
                const auto j = static_cast<std::size_t>(
                    static_cast<std::uint64_t>(i) + rng() % static_cast<std::uint64_t>(n - i));
                std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
            }
            idx.resize(static_cast<std::size_t>(m));
            const auto sub = data::to_batch(dataset, idx);
            const auto rf = nn::forward(f_spec, out.params_f, sub, nn::Mode::Eval);
            const auto rg = nn::forward(g_spec, out.params_g, sub, nn::Mode::Eval);
            sigma_f = hsic::median_sigma(cfg.hsic_on_logits ? rf.logits : rf.features, 1.0, rng);
            sigma_g = hsic::median_sigma(cfg.hsic_on_logits ? rg.logits : rg.features, 1.0, rng);
        }

        const std::vector<int> order = epoch_order(cfg.seed, epoch, n);
        std::vector<std::vector<int>> batches;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int sz = std::min(cfg.batch_size, n - start);
            if (sz < 4) continue;  // shared rule so all trainers see identical batches
            batches.emplace_back(order.begin() + start, order.begin() + start + sz);
        }

        double sum_loss_f = 0.0, sum_loss_g = 0.0, sum_hsic = 0.0;
        double sum_norm_f = 0.0, sum_norm_g = 0.0;
        int cnt_f = 0, cnt_g = 0, cnt_h = 0, groups_done = 0;
        bool exploded = false;

        for (std::size_t b0 = 0; b0 < batches.size() && !exploded;
             b0 += static_cast<std::size_t>(cfg.grad_accum_steps)) {
            const int k = static_cast<int>(
                std::min<std::size_t>(static_cast<std::size_t>(cfg.grad_accum_steps),
                                      batches.size() - b0));
            std::vector<nn::Tensor<float>> micro(static_cast<std::size_t>(k));
            std::vector<std::vector<int>> micro_labels(static_cast<std::size_t>(k));
            for (int j = 0; j < k; ++j) {
                micro[static_cast<std::size_t>(j)] =
                    data::to_batch(dataset, batches[b0 + static_cast<std::size_t>(j)]);
                micro_labels[static_cast<std::size_t>(j)] =
                    data::batch_labels(dataset, batches[b0 + static_cast<std::size_t>(j)]);
            }
            const bool poison = update_counter == cfg.inject_nan_step;
            StepMetrics sm;
            switch (cfg.kind) {
                case Kind::Vanilla: {
                    const AccumOut a = accum_step(
                        out.params_f, opt_f, k,
                        [&](int j) {
                            return CoupledOut{
                                ce_grads(f_spec, out.params_f, micro[static_cast<std::size_t>(j)],
                                         micro_labels[static_cast<std::size_t>(j)]),
                                std::nan("")};
                        },
                        lr, cfg.explosion_threshold, poison);
                    sm.loss_f = a.mean_loss;
                    sm.grad_norm_f = a.norm;
                    sm.exploded = a.exploded;
                    break;
                }
                case Kind::Biased: {
                    const AccumOut a = accum_step(
                        out.params_g, opt_g, k,
                        [&](int j) {
                            return CoupledOut{
                                ce_grads(g_spec, out.params_g, micro[static_cast<std::size_t>(j)],
                                         micro_labels[static_cast<std::size_t>(j)]),
                                std::nan("")};
                        },
                        lr, cfg.explosion_threshold, poison);
                    sm.loss_g = a.mean_loss;
                    sm.grad_norm_g = a.norm;
                    sm.exploded = a.exploded;
                    break;
                }
                case Kind::Rubi: {
                    std::vector<nn::Tensor<float>> masks(static_cast<std::size_t>(k));
                    for (int j = 0; j < k; ++j)
                        masks[static_cast<std::size_t>(j)] =
                            nn::forward(g_spec, out.params_g, micro[static_cast<std::size_t>(j)],
                                        nn::Mode::Training)
                                .logits;
                    const AccumOut af = accum_step(
                        out.params_f, opt_f, k,
                        [&](int j) {
                            return CoupledOut{
                                rubi_f_grads(f_spec, out.params_f, masks[static_cast<std::size_t>(j)],
                                             micro[static_cast<std::size_t>(j)],
                                             micro_labels[static_cast<std::size_t>(j)]),
                                std::nan("")};
                        },
                        lr, cfg.explosion_threshold, poison);
                    sm.loss_f = af.mean_loss;
                    sm.grad_norm_f = af.norm;
                    sm.exploded = af.exploded;
                    if (!af.exploded) {
                        const AccumOut ag = accum_step(
                            out.params_g, opt_g, k,
                            [&](int j) {
                                return CoupledOut{
                                    ce_grads(g_spec, out.params_g,
                                             micro[static_cast<std::size_t>(j)],
                                             micro_labels[static_cast<std::size_t>(j)]),
                                    std::nan("")};
                            },
                            lr, cfg.explosion_threshold, false);
                        sm.loss_g = ag.mean_loss;
                        sm.grad_norm_g = ag.norm;
                        sm.exploded = ag.exploded;
                    }
                    break;
                }
                case Kind::Rebias: {
                    RebiasStepOptions o;
                    o.lr = lr;
                    o.lambda_f = cfg.lambda_f;
                    o.lambda_g = cfg.lambda_g;
                    o.sigma_f = sigma_f;
                    o.sigma_g = sigma_g;
                    o.hsic_on_logits = cfg.hsic_on_logits;
                    o.g_eval_in_f_step = cfg.g_eval_in_f_step;
                    o.g_step_uses_updated_f = cfg.g_step_uses_updated_f;
                    o.explosion_threshold = cfg.explosion_threshold;
                    const bool log_this = groups_done == 0 && cfg.lambda_f > 0.0;
                    nn::Tensor<float> cap_f, cap_g, f_pre;
                    if (log_this || !cfg.g_step_uses_updated_f) o.capture_features_f = &cap_f;
                    if (log_this) o.capture_features_g = &cap_g;
                    const AccumOut af = accum_step(
                        out.params_f, opt_f, k,
                        [&](int j) {
                            return rebias_f_grads(f_spec, out.params_f, g_spec, out.params_g,
                                                  micro[static_cast<std::size_t>(j)],
                                                  micro_labels[static_cast<std::size_t>(j)], o);
                        },
                        lr, cfg.explosion_threshold, poison);
                    sm.loss_f = af.mean_loss;
                    sm.hsic_f = af.mean_hsic;
                    sm.grad_norm_f = af.norm;
                    sm.exploded = af.exploded;
                    if (log_this && !af.exploded && k == 1 && cap_f.size() > 0) {
                        out.state.logged_hsic.push_back(
                            {epoch, cap_f, cap_g, sigma_f, sigma_g, af.mean_hsic});
                    }
                    if (!af.exploded) {
                        const nn::Tensor<float>* pre =
                            !cfg.g_step_uses_updated_f && cap_f.size() > 0 ? &cap_f : nullptr;
                        const AccumOut ag = accum_step(
                            out.params_g, opt_g, k,
                            [&](int j) {
                                return rebias_g_grads(f_spec, out.params_f, g_spec, out.params_g,
                                                      micro[static_cast<std::size_t>(j)],
                                                      micro_labels[static_cast<std::size_t>(j)], o,
                                                      pre);
                            },
                            lr, cfg.explosion_threshold, false);
                        sm.loss_g = ag.mean_loss;
                        sm.hsic_g = ag.mean_hsic;
                        sm.grad_norm_g = ag.norm;
                        sm.exploded = sm.exploded || ag.exploded;
                    }
                    break;
                }
            }
            ++update_counter;
            ++groups_done;
            if (!std::isnan(sm.loss_f)) { sum_loss_f += sm.loss_f; ++cnt_f; }
            if (!std::isnan(sm.loss_g)) { sum_loss_g += sm.loss_g; ++cnt_g; }
            if (!std::isnan(sm.hsic_f)) { sum_hsic += sm.hsic_f; ++cnt_h; }
            if (!std::isnan(sm.grad_norm_f)) sum_norm_f += sm.grad_norm_f;
            if (!std::isnan(sm.grad_norm_g)) sum_norm_g += sm.grad_norm_g;
            exploded = sm.exploded;
        }

        EpochMetrics em;
        em.epoch = epoch;
        em.lr = lr;
        if (cnt_f > 0) { em.loss_f = sum_loss_f / cnt_f; em.grad_norm_f = sum_norm_f / cnt_f; }
        if (cnt_g > 0) { em.loss_g = sum_loss_g / cnt_g; em.grad_norm_g = sum_norm_g / cnt_g; }
        if (cnt_h > 0) em.hsic = sum_hsic / cnt_h;
        em.diverged = exploded;
        out.state.history.push_back(em);
        if (on_epoch) on_epoch(em);
        if (exploded) {
            out.state.diverged = true;
            out.state.divergence_epoch = epoch;
        }
    }
    out.state.sigma_f = sigma_f;
    out.state.sigma_g = sigma_g;
    return out;
}

namespace {

std::string fmt_opt(double v) {
    if (std::isnan(v)) return "";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double parse_opt(const std::string& s) {
    if (s.empty()) return std::nan("");
    return std::stod(s);
}

}  // namespace

std::string metrics_csv_header() {
    return "epoch,lr,loss_f,loss_g,hsic,grad_norm_f,grad_norm_g,diverged";
}

std::string metrics_csv_row(const EpochMetrics& m) {
    std::ostringstream os;
    os << m.epoch << ',' << fmt_opt(m.lr) << ',' << fmt_opt(m.loss_f) << ',' << fmt_opt(m.loss_g)
       << ',' << fmt_opt(m.hsic) << ',' << fmt_opt(m.grad_norm_f) << ',' << fmt_opt(m.grad_norm_g)
       << ',' << (m.diverged ? "true" : "false");
    return os.str();
}

std::vector<EpochMetrics> parse_metrics_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    std::vector<EpochMetrics> out;
    bool first = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (first) {
            if (line != metrics_csv_header())
                throw std::runtime_error("metrics csv: unexpected header '" + line + "'");
            first = false;
            continue;
        }
        std::vector<std::string> f;
        std::string cur;
        for (char c : line) {
            if (c == ',') { f.push_back(cur); cur.clear(); }
            else cur.push_back(c);
        }
        f.push_back(cur);
        if (f.size() != 8) throw std::runtime_error("metrics csv: malformed row '" + line + "'");
        EpochMetrics m;
        m.epoch = std::stoi(f[0]);
        m.lr = parse_opt(f[1]);
        m.loss_f = parse_opt(f[2]);
        m.loss_g = parse_opt(f[3]);
        m.hsic = parse_opt(f[4]);
        m.grad_norm_f = parse_opt(f[5]);
        m.grad_norm_g = parse_opt(f[6]);
        m.diverged = f[7] == "true";
        out.push_back(m);
    }
    return out;
}

}  // namespace rebias::train
