#include <doctest.h>

#include <cmath>
#include <vector>

#include "rebias/biasgen.hpp"
#include "rebias/convnet.hpp"
#include "rebias/hsic.hpp"
#include "rebias/trainers.hpp"

using namespace rebias;
using nn::ConvNetSpec;
using nn::ModelParams;
using nn::Tensor;

namespace {

ConvNetSpec tiny_f() {
    ConvNetSpec s;
    s.kernel_size = 5;
    s.channels = {8, 12, 16, 20};
    s.feature_dim = 20;
    return s;
}

ConvNetSpec tiny_g() {
    ConvNetSpec s;
    s.kernel_size = 1;
    s.channels = {8, 12, 16, 20};
    s.feature_dim = 20;
    s.pool_after = {};
    return s;
}

data::BiasedDataset tiny_dataset(int n, double rho, std::uint64_t seed) {
    data::BiasConfig cfg;
    cfg.rho = rho;
    cfg.seed = seed;
    return data::build_dataset(cfg, data::BiasPalette::defaults(),
                               data::synthetic_digits(seed, n, data::Split::Train));
}

train::TrainerConfig base_config(train::Kind kind) {
    train::TrainerConfig c;
    c.kind = kind;
    c.epochs = 2;
    c.batch_size = 64;
    c.seed = 7;
    return c;
}

std::vector<float> all_values(const ModelParams<float>& p) {
    std::vector<float> out;
    p.for_each_tensor([&](const std::string&, const Tensor<float>& t) {
        out.insert(out.end(), t.values.begin(), t.values.end());
    });
    return out;
}

}  // namespace

TEST_CASE("config validation") {
    train::TrainerConfig c;
    c.validate();
    c.kind = train::Kind::Rebias;
    c.batch_size = 3;
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("batch_size >= 4"),
                         std::invalid_argument);
    c.batch_size = 256;
    c.lambda_f = -0.5;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK(train::kind_from_name("rubi") == train::Kind::Rubi);
    CHECK_THROWS_AS(train::kind_from_name("hex"), std::invalid_argument);
}

TEST_CASE("lr schedule is exact at the decade boundaries") {
    CHECK(train::lr_schedule(1e-3, 0.1, 20, 0) == 1e-3);
    CHECK(train::lr_schedule(1e-3, 0.1, 20, 19) == 1e-3);
    CHECK(train::lr_schedule(1e-3, 0.1, 20, 20) == 1e-4);
    CHECK(train::lr_schedule(1e-3, 0.1, 20, 40) == 1e-5);
    CHECK(train::lr_schedule(1e-3, 0.1, 20, 79) == 1e-6);
    CHECK_THROWS_AS(train::lr_schedule(1e-3, 0.1, 20, -1), std::invalid_argument);
}

TEST_CASE("adam first step moves by the learning rate independent of gradient scale") {
    for (const double c : {3.0, 3000.0, -0.25}) {
        ModelParams<float> p;
        p.fc_weight = Tensor<float>({0});
        p.fc_bias = Tensor<float>({2}, {1.0f, -2.0f});
        p.alloc_grads();
        p.fc_bias.grad = {static_cast<float>(c), static_cast<float>(c)};
        train::AdamState st;
        const double lr = 0.01;
        train::adam_update(p, st, lr);
        for (int i = 0; i < 2; ++i) {
            const double delta = static_cast<double>(p.fc_bias.values[static_cast<std::size_t>(i)]) -
                                 (i == 0 ? 1.0 : -2.0);
            CHECK(std::abs(delta + (c > 0 ? lr : -lr)) <= lr * 1e-4);  // -lr * sign(c)
        }
    }
}

TEST_CASE("adam leaves parameters fixed under zero gradients") {
    ModelParams<float> p;
    p.fc_weight = Tensor<float>({0});
    p.fc_bias = Tensor<float>({3}, {0.5f, -1.5f, 2.0f});
    p.alloc_grads();
    train::AdamState st;
    const auto before = p.fc_bias.values;
    for (int i = 0; i < 50; ++i) train::adam_update(p, st, 0.01);
    CHECK(p.fc_bias.values == before);
}

TEST_CASE("adam drives x^2 to zero like the scalar recurrence") {
    // test-local scalar simulation of the same recurrence
    double m = 0, v = 0, x_ref = 1.0;
    ModelParams<float> p;
    p.fc_weight = Tensor<float>({0});
    p.fc_bias = Tensor<float>({1}, {1.0f});
    p.alloc_grads();
    train::AdamState st;
    const double lr = 0.1;
    for (int t = 1; t <= 100; ++t) {
        const double g_ref = 2.0 * x_ref;
        m = 0.9 * m + 0.1 * g_ref;
        v = 0.999 * v + 0.001 * g_ref * g_ref;
        x_ref -= lr * (m / (1 - std::pow(0.9, t))) /
                 (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);

        p.fc_bias.grad[0] = 2.0f * p.fc_bias.values[0];
        train::adam_update(p, st, lr);
    }
    CHECK(std::abs(p.fc_bias.values[0]) <= 0.05);
    CHECK(p.fc_bias.values[0] == doctest::Approx(x_ref).epsilon(1e-4));
}

TEST_CASE("gradient norm monitor") {
    ModelParams<float> p;
    p.fc_weight = Tensor<float>({0});
    p.fc_bias = Tensor<float>({2}, {0.0f, 0.0f});
    p.alloc_grads();

    SUBCASE("all-zero gradients are ok with norm zero") {
        const auto r = train::grad_norm_monitor(p, 10.0);
        CHECK(r.norm == 0.0);
        CHECK_FALSE(r.exploded);
    }
    SUBCASE("the threshold itself is still ok (strict inequality)") {
        p.fc_bias.grad = {3.0f, 4.0f};
        CHECK_FALSE(train::grad_norm_monitor(p, 5.0).exploded);
        CHECK(train::grad_norm_monitor(p, 5.0).norm == doctest::Approx(5.0));
        CHECK(train::grad_norm_monitor(p, 4.999).exploded);
    }
    SUBCASE("any non-finite entry explodes") {
        p.fc_bias.grad = {0.0f, std::nanf("")};
        CHECK(train::grad_norm_monitor(p, 1e12).exploded);
        p.fc_bias.grad = {0.0f, std::numeric_limits<float>::infinity()};
        CHECK(train::grad_norm_monitor(p, 1e12).exploded);
    }
}

TEST_CASE("zero learning rate leaves parameters bit-exact") {
    const auto fs = tiny_f();
    auto params = nn::init_params<float>(fs, 3);
    const auto before = all_values(params);
    const auto ds = tiny_dataset(32, 0.9, 4);
    std::vector<int> idx(32);
    for (int i = 0; i < 32; ++i) idx[static_cast<std::size_t>(i)] = i;
    const auto batch = data::to_batch(ds, idx);
    const auto labels = data::batch_labels(ds, idx);
    train::AdamState opt;
    const auto m = train::train_step_vanilla(fs, params, opt, batch, labels, 0.0, 1e4);
    CHECK_FALSE(m.exploded);
    // running statistics may move; the trainable parameters may not
    params.for_each_param([&](const std::string& name, const Tensor<float>& t) {
        ModelParams<float> ref = nn::init_params<float>(fs, 3);
        ref.for_each_param([&](const std::string& rname, const Tensor<float>& rt) {
            if (rname == name) CHECK(t.values == rt.values);
        });
    });
}

TEST_CASE("a single sample is overfit within 200 steps") {
    const auto fs = tiny_f();
    auto params = nn::init_params<float>(fs, 5);
    const auto ds = tiny_dataset(1, 1.0, 6);
    const auto batch = data::to_batch(ds, {0});
    const auto labels = data::batch_labels(ds, {0});
    train::AdamState opt;
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 200; ++step) {
        const auto m = train::train_step_vanilla(fs, params, opt, batch, labels, 1e-2, 1e4);
        REQUIRE_FALSE(m.exploded);
        if (step == 0) first = m.loss_f;
        last = m.loss_f;
    }
    CHECK(last < 0.01);
    CHECK(last < first);
}

TEST_CASE("reported loss equals cross entropy recomputed on pre-update parameters") {
    const auto fs = tiny_f();
    auto params = nn::init_params<float>(fs, 8);
    const auto snapshot = params;  // pre-update copy
    const auto ds = tiny_dataset(16, 0.9, 9);
    std::vector<int> idx(16);
    for (int i = 0; i < 16; ++i) idx[static_cast<std::size_t>(i)] = i;
    const auto batch = data::to_batch(ds, idx);
    const auto labels = data::batch_labels(ds, idx);
    train::AdamState opt;
    const auto m = train::train_step_vanilla(fs, params, opt, batch, labels, 1e-3, 1e4);
    const auto res = nn::forward(fs, snapshot, batch, nn::Mode::Training);
    CHECK(m.loss_f == nn::cross_entropy(res.logits, labels));
}

TEST_CASE("rebias with zero lambdas reproduces vanilla and biased bit-exactly") {
    const auto fs = tiny_f();
    const auto gs = tiny_g();
    const auto ds = tiny_dataset(1000, 0.95, 11);

    auto cfg = base_config(train::Kind::Rebias);
    cfg.lambda_f = 0.0;
    cfg.lambda_g = 0.0;
    const auto rebias_run = train::run_training(cfg, fs, gs, ds);

    cfg.kind = train::Kind::Vanilla;
    const auto vanilla_run = train::run_training(cfg, fs, gs, ds);
    cfg.kind = train::Kind::Biased;
    const auto biased_run = train::run_training(cfg, fs, gs, ds);

    CHECK(all_values(rebias_run.params_f) == all_values(vanilla_run.params_f));
    CHECK(all_values(rebias_run.params_g) == all_values(biased_run.params_g));
    REQUIRE(rebias_run.state.history.size() == vanilla_run.state.history.size());
    for (std::size_t e = 0; e < rebias_run.state.history.size(); ++e) {
        CHECK(rebias_run.state.history[e].loss_f == vanilla_run.state.history[e].loss_f);
        CHECK(rebias_run.state.history[e].loss_g == biased_run.state.history[e].loss_g);
    }
}

TEST_CASE("update isolation: each net's trajectory is untouched by the other's penalty") {
    const auto fs = tiny_f();
    const auto gs = tiny_g();
    const auto ds = tiny_dataset(256, 0.99, 13);

    // f's HSIC penalty must not leak into g's trajectory
    auto cfg = base_config(train::Kind::Rebias);
    cfg.epochs = 1;
    cfg.lambda_f = 1.0;
    cfg.lambda_g = 0.0;
    const auto r1 = train::run_training(cfg, fs, gs, ds);
    cfg.kind = train::Kind::Biased;
    const auto biased_run = train::run_training(cfg, fs, gs, ds);
    CHECK(all_values(r1.params_g) == all_values(biased_run.params_g));

    // g's HSIC reward must not leak into f's trajectory
    cfg = base_config(train::Kind::Rebias);
    cfg.epochs = 1;
    cfg.lambda_f = 0.0;
    cfg.lambda_g = 1.0;
    const auto r2 = train::run_training(cfg, fs, gs, ds);
    cfg.kind = train::Kind::Vanilla;
    const auto vanilla_run = train::run_training(cfg, fs, gs, ds);
    CHECK(all_values(r2.params_f) == all_values(vanilla_run.params_f));
}

TEST_CASE("rubi with zero-initialized g masks logits by exactly one half") {
    const auto fs = tiny_f();
    const auto gs = tiny_g();
    auto f = nn::init_params<float>(fs, 21);
    auto g = nn::zero_params<float>(gs);
    const auto f0 = f;
    const auto ds = tiny_dataset(16, 0.9, 22);
    std::vector<int> idx(16);
    for (int i = 0; i < 16; ++i) idx[static_cast<std::size_t>(i)] = i;
    const auto batch = data::to_batch(ds, idx);
    const auto labels = data::batch_labels(ds, idx);

    train::AdamState of, og;
    const auto m = train::train_step_rubi(fs, f, of, gs, g, og, batch, labels, 1e-3, 1e4);

    const auto rf = nn::forward(fs, f0, batch, nn::Mode::Training);
    Tensor<float> halved = rf.logits;
    for (auto& v : halved.values) v *= 0.5f;
    CHECK(m.loss_f == nn::cross_entropy(halved, labels));
    CHECK(std::isnan(m.hsic_f));
}

TEST_CASE("rebias step reports the HSIC value present in its loss") {
    const auto fs = tiny_f();
    const auto gs = tiny_g();
    auto f = nn::init_params<float>(fs, 31);
    auto g = nn::init_params<float>(gs, 32);
    const auto f0 = f;
    const auto g0 = g;
    const auto ds = tiny_dataset(16, 0.9, 33);
    std::vector<int> idx(16);
    for (int i = 0; i < 16; ++i) idx[static_cast<std::size_t>(i)] = i;
    const auto batch = data::to_batch(ds, idx);
    const auto labels = data::batch_labels(ds, idx);

    train::AdamState of, og;
    train::RebiasStepOptions o;
    o.lr = 1e-3;
    nn::Tensor<float> cap_f, cap_g;
    o.capture_features_f = &cap_f;
    o.capture_features_g = &cap_g;
    const auto m = train::train_step_rebias(fs, f, of, gs, g, og, batch, labels, o);
    REQUIRE_FALSE(m.exploded);

    // recompute the logged value from the captured features
    const double again = hsic::hsic_value_grad(hsic::Estimator::Unbiased, cap_f, o.sigma_f, cap_g,
                                               o.sigma_g, nullptr, nullptr);
    CHECK(m.hsic_f == again);

    // and the captured features are what the two nets actually produced
    const auto rf = nn::forward(fs, f0, batch, nn::Mode::Training);
    const auto rg = nn::forward(gs, g0, batch, nn::Mode::Eval);
    CHECK(cap_f.values == rf.features.values);
    CHECK(cap_g.values == rg.features.values);

    CHECK(m.loss_f == doctest::Approx(nn::cross_entropy(rf.logits, labels)).epsilon(1e-12));
}

TEST_CASE("rebias rejects undersized batches") {
    const auto fs = tiny_f();
    const auto gs = tiny_g();
    auto f = nn::init_params<float>(fs, 41);
    auto g = nn::init_params<float>(gs, 42);
    const auto ds = tiny_dataset(3, 0.9, 43);
    const auto batch = data::to_batch(ds, {0, 1, 2});
    train::AdamState of, og;
    train::RebiasStepOptions o;
    CHECK_THROWS_AS(void(train::train_step_rebias(fs, f, of, gs, g, og, batch, {0, 1, 2}, o)),
                    std::invalid_argument);
}

TEST_CASE("gradient accumulation: k=1 is a plain step and linear losses are batch-decoupled") {
    SUBCASE("k=1 equals a plain step bit-exactly") {
        const auto fs = tiny_f();
        const auto ds = tiny_dataset(16, 0.9, 51);
        std::vector<int> idx(16);
        for (int i = 0; i < 16; ++i) idx[static_cast<std::size_t>(i)] = i;
        const auto batch = data::to_batch(ds, idx);
        const auto labels = data::batch_labels(ds, idx);

        auto p1 = nn::init_params<float>(fs, 52);
        auto p2 = p1;
        train::AdamState o1, o2;
        const auto m1 = train::train_step_vanilla(fs, p1, o1, batch, labels, 1e-3, 1e4);
        const auto m2 = train::accumulate_gradients(
            p2, o2, 1,
            [&](int) {
                nn::ForwardCache<float> cache;
                const auto res = nn::forward(fs, p2, batch, nn::Mode::Training, &cache);
                Tensor<float> dl;
                const double loss = nn::cross_entropy_grad(res.logits, labels, dl);
                nn::backward(fs, p2, cache, dl);
                nn::commit_bn_updates(p2, cache);
                return loss;
            },
            1e-3, 1e4);
        CHECK(m1.loss_f == m2.loss_f);
        CHECK(all_values(p1) == all_values(p2));
    }

    SUBCASE("squared loss on a linear map: 4x16 accumulation equals one 64 batch") {
        // no batch coupling and no batch norm: gradients are exactly linear
        const int n = 64, dim = 5, classes = 3;
        Tensor<double> x({n, dim}), w({classes, dim}), b({classes}), t({n, classes});
        auto rng = nn::make_rng(53);
        auto u = [&rng]() { return 2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0; };
        for (auto& v : x.values) v = u();
        for (auto& v : w.values) v = u();
        for (auto& v : t.values) v = u();

        auto grad_of = [&](int start, int count, std::vector<double>& dw) {
            Tensor<double> xs({count, dim}), ts({count, classes});
            std::copy(x.values.begin() + start * dim, x.values.begin() + (start + count) * dim,
                      xs.values.begin());
            std::copy(t.values.begin() + start * classes,
                      t.values.begin() + (start + count) * classes, ts.values.begin());
            Tensor<double> y;
            nn::linear_forward(xs, w, b, y);
            Tensor<double> dy(y.shape);
            for (std::size_t i = 0; i < y.values.size(); ++i)
                dy.values[i] = 2.0 * (y.values[i] - ts.values[i]) / count;
            nn::linear_backward(xs, w, dy, nullptr, &dw, nullptr);
        };
        std::vector<double> big;
        grad_of(0, 64, big);
        std::vector<double> acc(big.size(), 0.0);
        for (int k = 0; k < 4; ++k) {
            std::vector<double> dw;
            grad_of(16 * k, 16, dw);
            for (std::size_t i = 0; i < dw.size(); ++i) acc[i] += dw[i] / 4.0;
        }
        for (std::size_t i = 0; i < big.size(); ++i) CHECK(std::abs(acc[i] - big[i]) <= 1e-10);
    }
}

TEST_CASE("gradient accumulation is not equivalent for HSIC") {
    // 4 micro-batches of 16 against one 64-sample evaluation on dependent features
    auto rng = nn::make_rng(61);
    const int n = 64, d = 2;
    Tensor<double> u({n, d}), v({n, d});
    auto g = [&rng]() {
        const double a = std::max(static_cast<double>(rng() >> 11) * 0x1.0p-53, 1e-300);
        const double b = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(a)) * std::cos(2.0 * 3.14159265358979323846 * b);
    };
    for (auto& x : u.values) x = g();
    for (std::size_t i = 0; i < v.values.size(); ++i)
        v.values[i] = u.values[i] * u.values[i] + 0.3 * g();

    Tensor<double> du_big;
    const double big = hsic::hsic_value_grad(hsic::Estimator::Unbiased, u, 1.0, v, 1.0, &du_big,
                                             nullptr);
    double acc_value = 0.0;
    Tensor<double> du_acc({n, d});
    for (int k = 0; k < 4; ++k) {
        Tensor<double> uk({16, d}), vk({16, d});
        std::copy(u.values.begin() + 16 * k * d, u.values.begin() + 16 * (k + 1) * d,
                  uk.values.begin());
        std::copy(v.values.begin() + 16 * k * d, v.values.begin() + 16 * (k + 1) * d,
                  vk.values.begin());
        Tensor<double> duk;
        acc_value += hsic::hsic_value_grad(hsic::Estimator::Unbiased, uk, 1.0, vk, 1.0, &duk,
                                           nullptr) / 4.0;
        for (int i = 0; i < 16 * d; ++i)
            du_acc.values[static_cast<std::size_t>(16 * k * d + i)] = duk.values[static_cast<std::size_t>(i)] / 4.0;
    }
    CHECK(std::abs(acc_value - big) > 1e-3);
    double grad_gap = 0.0;
    for (std::size_t i = 0; i < du_big.values.size(); ++i)
        grad_gap = std::max(grad_gap, std::abs(du_big.values[i] - du_acc.values[i]));
    CHECK(grad_gap > 1e-3);
}

TEST_CASE("injected NaN gradient stops the run gracefully") {
    const auto fs = tiny_f();
    const auto gs = tiny_g();
    const auto ds = tiny_dataset(256, 0.9, 71);
    auto cfg = base_config(train::Kind::Vanilla);
    cfg.epochs = 4;
    cfg.inject_nan_step = 5;  // second epoch (4 updates per epoch at batch 64)
    const auto run = train::run_training(cfg, fs, gs, ds);
    CHECK(run.state.diverged);
    CHECK(run.state.divergence_epoch == 1);
    REQUIRE(run.state.history.size() == 2);
    CHECK(run.state.history.back().diverged);

    // the partial metrics serialize into a valid csv
    std::string csv = train::metrics_csv_header() + "\n";
    for (const auto& em : run.state.history) csv += train::metrics_csv_row(em) + "\n";
    const auto parsed = train::parse_metrics_csv(csv);
    REQUIRE(parsed.size() == 2);
    CHECK(parsed[0].epoch == 0);
    CHECK_FALSE(parsed[0].diverged);
    CHECK(parsed[1].diverged);
    CHECK(parsed[1].lr == run.state.history[1].lr);
}

TEST_CASE("identical configs give identical runs") {
    const auto fs = tiny_f();
    const auto gs = tiny_g();
    const auto ds = tiny_dataset(200, 0.99, 81);
    auto cfg = base_config(train::Kind::Rebias);
    const auto r1 = train::run_training(cfg, fs, gs, ds);
    const auto r2 = train::run_training(cfg, fs, gs, ds);
    REQUIRE(r1.state.history.size() == r2.state.history.size());
    for (std::size_t e = 0; e < r1.state.history.size(); ++e) {
        CHECK(r1.state.history[e].loss_f == r2.state.history[e].loss_f);
        CHECK(r1.state.history[e].loss_g == r2.state.history[e].loss_g);
        CHECK(r1.state.history[e].hsic == r2.state.history[e].hsic);
    }
    CHECK(all_values(r1.params_f) == all_values(r2.params_f));
    CHECK(all_values(r1.params_g) == all_values(r2.params_g));
}

TEST_CASE("every logged HSIC value recomputes exactly from the logged features") {
    const auto fs = tiny_f();
    const auto gs = tiny_g();
    const auto ds = tiny_dataset(200, 0.99, 91);
    auto cfg = base_config(train::Kind::Rebias);
    cfg.epochs = 3;
    const auto run = train::run_training(cfg, fs, gs, ds);
    REQUIRE(run.state.logged_hsic.size() == 3);
    for (const auto& log : run.state.logged_hsic) {
        const double again = hsic::hsic_value_grad(hsic::Estimator::Unbiased, log.features_f,
                                                   log.sigma_f, log.features_g, log.sigma_g,
                                                   nullptr, nullptr);
        CHECK(log.hsic == again);
    }
}

TEST_CASE("all four trainers fit a tiny fully biased dataset") {
    nn::ConvNetSpec fs;
    fs.kernel_size = 5;
    fs.channels = {12, 16, 24, 32};
    fs.feature_dim = 32;
    nn::ConvNetSpec gs = fs;
    gs.kernel_size = 1;
    gs.pool_after = {};
    const auto ds = tiny_dataset(100, 1.0, 101);
    std::vector<int> all(100);
    for (int i = 0; i < 100; ++i) all[static_cast<std::size_t>(i)] = i;
    const auto batch = data::to_batch(ds, all);
    const auto labels = data::batch_labels(ds, all);
    for (const auto kind :
         {train::Kind::Vanilla, train::Kind::Biased, train::Kind::Rubi, train::Kind::Rebias}) {
        auto cfg = base_config(kind);
        cfg.epochs = 20;
        cfg.batch_size = 10;
        cfg.base_lr = 1e-2;
        const auto run = train::run_training(cfg, fs, gs, ds);
        REQUIRE_FALSE(run.state.diverged);
        // each trainer's own objective, measured on the full training set
        double fit;
        if (kind == train::Kind::Biased) {
            const auto res = nn::forward(gs, run.params_g, batch, nn::Mode::Training);
            fit = nn::cross_entropy(res.logits, labels);
        } else if (kind == train::Kind::Rubi) {
            const auto rf = nn::forward(fs, run.params_f, batch, nn::Mode::Training);
            const auto rg = nn::forward(gs, run.params_g, batch, nn::Mode::Training);
            Tensor<float> masked = rf.logits;
            for (std::size_t i = 0; i < masked.values.size(); ++i)
                masked.values[i] *= static_cast<float>(
                    1.0 / (1.0 + std::exp(-static_cast<double>(rg.logits.values[i]))));
            fit = nn::cross_entropy(masked, labels);
        } else {
            const auto res = nn::forward(fs, run.params_f, batch, nn::Mode::Training);
            fit = nn::cross_entropy(res.logits, labels);
        }
        INFO("kind = ", train::kind_name(kind));
        CHECK(fit < 0.05);
    }
}

TEST_CASE("epoch order is a permutation shared across trainers and differs across epochs") {
    const auto o1 = train::epoch_order(5, 0, 100);
    const auto o2 = train::epoch_order(5, 0, 100);
    const auto o3 = train::epoch_order(5, 1, 100);
    CHECK(o1 == o2);
    CHECK(o1 != o3);
    std::vector<int> sorted = o1;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 100; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}
