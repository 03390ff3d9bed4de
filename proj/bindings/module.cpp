#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "rebias/biasgen.hpp"
#include "rebias/convnet.hpp"
#include "rebias/evalbench.hpp"
#include "rebias/experiment.hpp"
#include "rebias/hsic.hpp"
#include "rebias/trainers.hpp"

namespace py = pybind11;
using namespace rebias;

namespace {

template <typename T>
nn::Tensor<T> tensor_from_array(const py::array_t<T, py::array::c_style | py::array::forcecast>& a) {
    std::vector<int> shape(static_cast<std::size_t>(a.ndim()));
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<std::size_t>(i)] = static_cast<int>(a.shape(i));
    std::vector<T> vals(a.data(), a.data() + a.size());
    return nn::Tensor<T>(std::move(shape), std::move(vals));
}

template <typename T>
py::array_t<T> array_from_tensor(const nn::Tensor<T>& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<T> out(shape);
    std::copy(t.values.begin(), t.values.end(), out.mutable_data());
    return out;
}

hsic::GramMatrix<double> gram_from_array(
    const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2 || a.shape(0) != a.shape(1))
        throw std::invalid_argument("Gram matrix must be square");
    hsic::GramMatrix<double> g;
    g.n = static_cast<int>(a.shape(0));
    g.entries.assign(a.data(), a.data() + a.size());
    return g;
}

// Holds a float model together with its architecture.
struct PyModel {
    nn::ConvNetSpec spec;
    nn::ModelParams<float> params;

    PyModel(const nn::ConvNetSpec& s, std::uint64_t seed)
        : spec(s), params(nn::init_params<float>(s, seed)) {}
    explicit PyModel(const nn::ConvNetSpec& s) : spec(s), params(nn::zero_params<float>(s)) {}
    PyModel() = default;

    py::tuple forward_np(const py::array_t<float, py::array::c_style | py::array::forcecast>& batch,
                         bool training) {
        auto t = tensor_from_array<float>(batch);
        nn::ForwardCache<float> cache;
        const auto res =
            nn::forward(spec, params, t, training ? nn::Mode::Training : nn::Mode::Eval,
                        training ? &cache : nullptr);
        if (training) nn::commit_bn_updates(params, cache);
        return py::make_tuple(array_from_tensor(res.features), array_from_tensor(res.logits));
    }
};

nn::ConvNetSpec default_f_spec() { return nn::ConvNetSpec{}; }

nn::ConvNetSpec default_g_spec() {
    nn::ConvNetSpec s;  // same architecture as f except the kernel size
    s.kernel_size = 1;
    return s;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Core operations of the rebiaslab de-biasing laboratory";
    m.attr("__version__") = cli::kArtifactVersion;

    // --- convnet ---
    py::class_<nn::ConvNetSpec>(m, "ConvNetSpec")
        .def(py::init<>())
        .def_readwrite("num_layers", &nn::ConvNetSpec::num_layers)
        .def_readwrite("kernel_size", &nn::ConvNetSpec::kernel_size)
        .def_readwrite("channels", &nn::ConvNetSpec::channels)
        .def_readwrite("num_classes", &nn::ConvNetSpec::num_classes)
        .def_readwrite("feature_dim", &nn::ConvNetSpec::feature_dim)
        .def_readwrite("pool_after", &nn::ConvNetSpec::pool_after)
        .def_readwrite("in_channels", &nn::ConvNetSpec::in_channels)
        .def_readwrite("in_h", &nn::ConvNetSpec::in_h)
        .def_readwrite("in_w", &nn::ConvNetSpec::in_w)
        .def("validate", &nn::ConvNetSpec::validate);
    m.def("default_f_spec", &default_f_spec, "7x7 four-layer target net");
    m.def("default_g_spec", &default_g_spec, "1x1 four-layer texture-biased net");

    py::class_<PyModel>(m, "Model")
        .def(py::init<const nn::ConvNetSpec&, std::uint64_t>(), py::arg("spec"), py::arg("seed"))
        .def_static("zeros", [](const nn::ConvNetSpec& s) { return PyModel(s); }, py::arg("spec"))
        .def_readonly("spec", &PyModel::spec)
        .def("forward", &PyModel::forward_np, py::arg("batch"), py::arg("training") = false,
             "Returns (features, logits) for a float batch of shape (n, 3, 28, 28)")
        .def("save", [](const PyModel& mo, const std::string& path) {
            nn::save_checkpoint(path, mo.spec, mo.params);
        })
        .def_static("load", [](const std::string& path) {
            PyModel mo;
            nn::load_checkpoint(path, mo.spec, mo.params);
            return mo;
        });

    m.def(
        "cross_entropy",
        [](const py::array_t<float, py::array::c_style | py::array::forcecast>& logits,
           const std::vector<int>& labels) {
            return nn::cross_entropy(tensor_from_array<float>(logits), labels);
        },
        py::arg("logits"), py::arg("labels"));

    // --- hsic ---
    m.def(
        "rbf_gram",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& feats,
           double sigma) {
            const auto g = hsic::rbf_gram(tensor_from_array<double>(feats), sigma);
            nn::Tensor<double> t({g.n, g.n}, g.entries);
            return array_from_tensor(t);
        },
        py::arg("features"), py::arg("sigma"));
    m.def(
        "hsic_biased",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& K,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& L) {
            return hsic::hsic_biased(gram_from_array(K), gram_from_array(L)).value;
        },
        py::arg("K"), py::arg("L"));
    m.def(
        "hsic_unbiased",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& K,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& L) {
            return hsic::hsic_unbiased(gram_from_array(K), gram_from_array(L)).value;
        },
        py::arg("K"), py::arg("L"));
    m.def(
        "hsic_from_features",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& U,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& V, double sigma_u,
           double sigma_v, const std::string& estimator) {
            const auto kind = estimator == "biased" ? hsic::Estimator::Biased
                                                    : hsic::Estimator::Unbiased;
            return hsic::hsic_value_grad(kind, tensor_from_array<double>(U), sigma_u,
                                         tensor_from_array<double>(V), sigma_v, nullptr, nullptr);
        },
        py::arg("U"), py::arg("V"), py::arg("sigma_u") = 1.0, py::arg("sigma_v") = 1.0,
        py::arg("estimator") = "unbiased");
    m.def(
        "hsic_grad",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& U,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& V, double sigma_u,
           double sigma_v, const std::string& estimator) {
            const auto kind = estimator == "biased" ? hsic::Estimator::Biased
                                                    : hsic::Estimator::Unbiased;
            nn::Tensor<double> dU, dV;
            const double v = hsic::hsic_value_grad(kind, tensor_from_array<double>(U), sigma_u,
                                                   tensor_from_array<double>(V), sigma_v, &dU, &dV);
            return py::make_tuple(v, array_from_tensor(dU), array_from_tensor(dV));
        },
        py::arg("U"), py::arg("V"), py::arg("sigma_u") = 1.0, py::arg("sigma_v") = 1.0,
        py::arg("estimator") = "unbiased");
    m.def(
        "median_sigma",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& feats,
           double fraction, std::uint64_t seed) {
            auto rng = nn::make_rng(seed);
            return hsic::median_sigma(tensor_from_array<double>(feats), fraction, rng);
        },
        py::arg("features"), py::arg("sample_fraction") = 1.0, py::arg("seed") = 0);

    // --- dataset ---
    m.def("default_palette", []() {
        const auto p = data::BiasPalette::defaults();
        std::vector<std::uint8_t> flat;
        for (const auto& c : p.colors) flat.insert(flat.end(), c.begin(), c.end());
        return py::array_t<std::uint8_t>({10, 3}, flat.data());
    });
    m.def(
        "build_biased_dataset",
        [](double rho, std::uint64_t seed, int count, const std::string& split,
           int background_threshold) {
            const auto sp = data::split_from_name(split);
            const auto source =
                data::synthetic_digits(nn::mix_seed(seed, 0xD16175ULL), count, sp);
            data::BiasConfig cfg;
            cfg.rho = rho;
            cfg.seed = seed;
            cfg.split = sp;
            cfg.background_threshold = background_threshold;
            const auto ds = data::build_dataset(cfg, data::BiasPalette::defaults(), source);
            const int n = static_cast<int>(ds.samples.size());
            std::vector<std::uint8_t> images(static_cast<std::size_t>(n) * 3 * data::kImagePixels);
            std::vector<std::uint8_t> digits(static_cast<std::size_t>(n));
            std::vector<std::uint8_t> colors(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) {
                const auto& s = ds.samples[static_cast<std::size_t>(i)];
                std::copy(s.image.begin(), s.image.end(),
                          images.begin() + static_cast<std::ptrdiff_t>(i) * 3 * data::kImagePixels);
                digits[static_cast<std::size_t>(i)] = s.digit_label;
                colors[static_cast<std::size_t>(i)] = s.color_label;
            }
            py::dict out;
            out["images"] = py::array_t<std::uint8_t>(
                {n, 3, data::kImageSide, data::kImageSide}, images.data());
            out["digit_labels"] = py::array_t<std::uint8_t>(n, digits.data());
            out["color_labels"] = py::array_t<std::uint8_t>(n, colors.data());
            out["checksum"] = ds.checksum();
            return out;
        },
        py::arg("rho"), py::arg("seed") = 1, py::arg("count") = 1000, py::arg("split") = "train",
        py::arg("background_threshold") = 0,
        "Color-biased synthetic digit dataset; images are uint8 (n, 3, 28, 28)");
    m.def(
        "bias_audit",
        [](const std::vector<std::uint8_t>& digit_labels,
           const std::vector<std::uint8_t>& color_labels) {
            const auto a = data::bias_audit_labels(digit_labels, color_labels);
            py::dict out;
            out["preassigned_rate"] = std::vector<double>(a.preassigned_rate.begin(),
                                                          a.preassigned_rate.end());
            out["mutual_information_nats"] = a.mutual_information_nats;
            out["class_counts"] = std::vector<std::int64_t>(a.class_counts.begin(),
                                                            a.class_counts.end());
            return out;
        },
        py::arg("digit_labels"), py::arg("color_labels"));

    // --- training/eval ---
    m.def("lr_schedule", &train::lr_schedule, py::arg("base_lr"), py::arg("factor"),
          py::arg("period"), py::arg("epoch"));
    m.def(
        "kmeans",
        [](const std::vector<std::vector<double>>& points, int k, std::uint64_t seed) {
            auto rng = nn::make_rng(seed);
            return bench::kmeans(points, k, rng);
        },
        py::arg("points"), py::arg("k"), py::arg("seed") = 0);
    m.def(
        "train_run",
        [](const std::string& kind, double rho, int epochs, int batch_size, int train_count,
           int val_count, std::uint64_t seed, double lambda_f, double lambda_g, double sigma,
           const std::vector<int>& channels, double base_lr) {
            cli::ExperimentConfig cfg;
            cfg.dataset.rho = rho;
            cfg.dataset.seed = seed;
            cfg.dataset.train_count = train_count;
            cfg.dataset.val_count = val_count;
            cfg.model.f_channels = channels;
            cfg.model.g_channels = channels;
            cfg.trainer.kind = kind;
            cfg.trainer.epochs = epochs;
            cfg.trainer.batch_size = batch_size;
            cfg.trainer.base_lr = base_lr;
            cfg.trainer.seed = seed;
            cfg.trainer.lambda_f = lambda_f;
            cfg.trainer.lambda_g = lambda_g;
            cfg.trainer.sigma = sigma;
            cli::validate_config(cfg);

            const auto source = cli::load_source(cfg, data::Split::Train);
            data::BiasConfig bc;
            bc.rho = rho;
            bc.seed = seed;
            bc.background_threshold = 0;
            const auto dataset =
                data::build_dataset(bc, data::BiasPalette::defaults(), source);
            const auto result =
                train::run_training(cli::trainer_from_config(cfg), cli::f_spec_from_config(cfg),
                                    cli::g_spec_from_config(cfg), dataset);
            const bool use_g = cfg.trainer.kind == "biased";
            const auto report = bench::evaluate_pair(
                use_g ? result.spec_g : result.spec_f, use_g ? result.params_g : result.params_f,
                kind, rho, seed, cli::load_source(cfg, data::Split::Val),
                data::BiasPalette::defaults(), seed, 0, result.state.diverged);

            py::dict out;
            std::vector<double> loss_f, loss_g, hs;
            for (const auto& em : result.state.history) {
                loss_f.push_back(em.loss_f);
                loss_g.push_back(em.loss_g);
                hs.push_back(em.hsic);
            }
            out["loss_f"] = loss_f;
            out["loss_g"] = loss_g;
            out["hsic"] = hs;
            out["diverged"] = result.state.diverged;
            out["divergence_epoch"] = result.state.divergence_epoch;
            out["biased_accuracy"] = report.biased_accuracy;
            out["unbiased_accuracy"] = report.unbiased_accuracy;
            return out;
        },
        py::arg("kind"), py::arg("rho") = 0.999, py::arg("epochs") = 2,
        py::arg("batch_size") = 64, py::arg("train_count") = 500, py::arg("val_count") = 500,
        py::arg("seed") = 1, py::arg("lambda_f") = 1.0, py::arg("lambda_g") = 1.0,
        py::arg("sigma") = 1.0, py::arg("channels") = std::vector<int>{8, 12, 16, 20},
        py::arg("base_lr") = 1e-3,
        "Small in-memory training run; returns per-epoch metrics and final accuracies");
}
