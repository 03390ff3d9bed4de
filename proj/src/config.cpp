#include "rebias/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sstream>

namespace rebias::cli {

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    cur = trim(cur);
    if (!cur.empty() || !out.empty()) out.push_back(cur);
    if (out.size() == 1 && out[0].empty()) out.clear();
    return out;
}

struct Field {
    std::string key;
    std::string doc;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename T>
T parse_scalar(const std::string& key, const std::string& v);

template <>
int parse_scalar<int>(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const int out = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer for '" + key + "': '" + v + "'");
    }
}

template <>
std::int64_t parse_scalar<std::int64_t>(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::int64_t out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: bad integer for '" + key + "': '" + v + "'");
    }
}

template <>
std::uint64_t parse_scalar<std::uint64_t>(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: bad unsigned integer for '" + key + "': '" + v + "'");
    }
}

template <>
double parse_scalar<double>(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing characters");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: bad number for '" + key + "': '" + v + "'");
    }
}

template <>
bool parse_scalar<bool>(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("config: bad boolean for '" + key + "' (want true|false): '" + v + "'");
}

template <typename T>
std::string show(const T& v) {
    if constexpr (std::is_same_v<T, bool>) return v ? "true" : "false";
    else if constexpr (std::is_same_v<T, double>) return fmt_double(v);
    else if constexpr (std::is_same_v<T, std::string>) return v;
    else return std::to_string(v);
}

template <typename T>
std::string show_list(const std::vector<T>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << show(v[i]);
    return os.str();
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
    std::vector<T> out;
    for (const auto& item : split(v, ','))
        if constexpr (std::is_same_v<T, std::string>) out.push_back(item);
        else out.push_back(parse_scalar<T>(key, item));
    return out;
}

#define SCALAR(key, doc, expr)                                                      \
    Field{key, doc,                                                                \
          [](const ExperimentConfig& c) { return show(c.expr); },                  \
          [](ExperimentConfig& c, const std::string& v) {                          \
              c.expr = parse_scalar<std::decay_t<decltype(c.expr)>>(key, v);       \
          }}

#define STRING(key, doc, expr)                                                     \
    Field{key, doc, [](const ExperimentConfig& c) { return c.expr; },              \
          [](ExperimentConfig& c, const std::string& v) { c.expr = v; }}

#define LIST(key, doc, expr)                                                                     \
    Field{key, doc,                                                                             \
          [](const ExperimentConfig& c) { return show_list(c.expr); },                          \
          [](ExperimentConfig& c, const std::string& v) {                                       \
              c.expr = parse_list<std::decay_t<decltype(c.expr)>::value_type>(key, v);          \
          }}

const std::vector<Field>& schema() {
    static const std::vector<Field> fields = {
        STRING("dataset.source", "digit source: synthetic | idx", dataset.source),
        STRING("dataset.idx_dir", "directory with the canonical IDX files (source=idx)",
               dataset.idx_dir),
        SCALAR("dataset.train_count", "synthetic training images", dataset.train_count),
        SCALAR("dataset.val_count", "synthetic validation images", dataset.val_count),
        SCALAR("dataset.rho", "probability of the preassigned background color", dataset.rho),
        SCALAR("dataset.seed", "dataset seed", dataset.seed),
        SCALAR("dataset.background_threshold", "grayscale cutoff for background pixels",
               dataset.background_threshold),
        STRING("dataset.palette", "default | 10 'r,g,b' triples joined by ';'", dataset.palette),
        STRING("dataset.dir", "dataset directory (derived under the output root when empty)",
               dataset.dir),
        SCALAR("model.f_kernel_size", "target net kernel size", model.f_kernel_size),
        LIST("model.f_channels", "target net channels per layer", model.f_channels),
        LIST("model.f_pool_after", "layers followed by 2x2 average pooling (target net)",
             model.f_pool_after),
        SCALAR("model.g_kernel_size", "biased net kernel size", model.g_kernel_size),
        LIST("model.g_channels", "biased net channels per layer", model.g_channels),
        LIST("model.g_pool_after", "layers followed by 2x2 average pooling (biased net)",
             model.g_pool_after),
        SCALAR("model.num_classes", "number of classes", model.num_classes),
        STRING("trainer.kind", "vanilla | biased | rubi | rebias", trainer.kind),
        SCALAR("trainer.epochs", "training epochs", trainer.epochs),
        SCALAR("trainer.batch_size", "mini-batch size", trainer.batch_size),
        SCALAR("trainer.base_lr", "initial learning rate", trainer.base_lr),
        SCALAR("trainer.lr_decay_factor", "step-decay factor", trainer.lr_decay_factor),
        SCALAR("trainer.lr_decay_period", "epochs between decays", trainer.lr_decay_period),
        SCALAR("trainer.lambda_f", "HSIC penalty weight in f's loss", trainer.lambda_f),
        SCALAR("trainer.lambda_g", "HSIC reward weight in g's loss", trainer.lambda_g),
        SCALAR("trainer.grad_accum_steps", "micro-batches per optimizer step",
               trainer.grad_accum_steps),
        SCALAR("trainer.seed", "training seed (init + data order)", trainer.seed),
        SCALAR("trainer.weight_decay", "decoupled weight decay", trainer.weight_decay),
        SCALAR("trainer.explosion_threshold", "gradient-norm cap before a run is stopped",
               trainer.explosion_threshold),
        STRING("trainer.sigma_strategy", "RBF bandwidth: fixed | median", trainer.sigma_strategy),
        SCALAR("trainer.sigma", "fixed RBF bandwidth", trainer.sigma),
        SCALAR("trainer.sigma_sample_fraction", "data fraction for the median heuristic",
               trainer.sigma_sample_fraction),
        STRING("trainer.hsic_features", "couple HSIC on: features | logits",
               trainer.hsic_features),
        SCALAR("trainer.g_eval_in_f_step", "g uses running stats during f's update",
               trainer.g_eval_in_f_step),
        SCALAR("trainer.g_step_uses_updated_f", "g's HSIC term sees post-update f",
               trainer.g_step_uses_updated_f),
        SCALAR("trainer.inject_nan_step", "test hook: poison one gradient at this update (-1 off)",
               trainer.inject_nan_step),
        LIST("eval.rhos", "bias levels for sweeps", eval.rhos),
        LIST("eval.methods", "trainers for sweeps", eval.methods),
        LIST("eval.seeds", "seeds for sweeps", eval.seeds),
        SCALAR("eval.n_clusters", "texture clusters for the cluster report", eval.n_clusters),
        SCALAR("eval.batch_size", "evaluation batch size", eval.batch_size),
        STRING("output.dir", "output root (REBIASLAB_OUT or ./out when empty)", output.dir),
        STRING("output.run_dir", "run directory (derived when empty)", output.run_dir),
        SCALAR("sweep.workers", "parallel sweep cells", sweep_workers),
    };
    return fields;
}

const Field& find_field(const std::string& key) {
    for (const auto& f : schema())
        if (f.key == key) return f;
    throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return render_config(a) == render_config(b);
}

std::string render_config(const ExperimentConfig& cfg) {
    std::ostringstream os;
    for (const auto& f : schema()) os << f.key << " = " << f.get(cfg) << "\n";
    return os.str();
}

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected 'key = value', got '" + line + "'");
        apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    find_field(key).set(cfg, value);
}

std::string config_help() {
    ExperimentConfig defaults;
    std::ostringstream os;
    for (const auto& f : schema()) {
        std::string d = f.get(defaults);
        os << "  " << f.key << " = " << (d.empty() ? "(empty)" : d) << "\n      " << f.doc << "\n";
    }
    return os.str();
}

data::BiasPalette palette_from_config(const ExperimentConfig& cfg) {
    if (cfg.dataset.palette == "default") return data::BiasPalette::defaults();
    const auto triples = split(cfg.dataset.palette, ';');
    if (triples.size() != data::kNumClasses)
        throw ConfigError("config: dataset.palette needs exactly 10 'r,g,b' triples");
    data::BiasPalette p;
    for (std::size_t k = 0; k < triples.size(); ++k) {
        const auto ch = split(triples[k], ',');
        if (ch.size() != 3)
            throw ConfigError("config: palette entry '" + triples[k] + "' is not 'r,g,b'");
        for (int c = 0; c < 3; ++c) {
            const int v = parse_scalar<int>("dataset.palette", ch[static_cast<std::size_t>(c)]);
            if (v < 0 || v > 255)
                throw ConfigError("config: palette channel out of [0,255]: " + triples[k]);
            p.colors[k][static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(v);
        }
    }
    try {
        p.validate();
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return p;
}

namespace {

nn::ConvNetSpec spec_from(int kernel, const std::vector<int>& channels,
                          const std::vector<int>& pool_after, int num_classes) {
    nn::ConvNetSpec s;
    s.num_layers = static_cast<int>(channels.size());
    s.kernel_size = kernel;
    s.channels = channels;
    s.num_classes = num_classes;
    s.feature_dim = channels.empty() ? 0 : channels.back();
    s.pool_after = pool_after;
    return s;
}

}  // namespace

nn::ConvNetSpec f_spec_from_config(const ExperimentConfig& cfg) {
    return spec_from(cfg.model.f_kernel_size, cfg.model.f_channels, cfg.model.f_pool_after,
                     cfg.model.num_classes);
}

nn::ConvNetSpec g_spec_from_config(const ExperimentConfig& cfg) {
    return spec_from(cfg.model.g_kernel_size, cfg.model.g_channels, cfg.model.g_pool_after,
                     cfg.model.num_classes);
}

train::TrainerConfig trainer_from_config(const ExperimentConfig& cfg) {
    train::TrainerConfig t;
    t.kind = train::kind_from_name(cfg.trainer.kind);
    t.epochs = cfg.trainer.epochs;
    t.batch_size = cfg.trainer.batch_size;
    t.base_lr = cfg.trainer.base_lr;
    t.lr_decay_factor = cfg.trainer.lr_decay_factor;
    t.lr_decay_period = cfg.trainer.lr_decay_period;
    t.lambda_f = cfg.trainer.lambda_f;
    t.lambda_g = cfg.trainer.lambda_g;
    t.grad_accum_steps = cfg.trainer.grad_accum_steps;
    t.seed = cfg.trainer.seed;
    t.weight_decay = cfg.trainer.weight_decay;
    t.explosion_threshold = cfg.trainer.explosion_threshold;
    if (cfg.trainer.sigma_strategy == "fixed")
        t.kernel.strategy = hsic::KernelConfig::Strategy::Fixed;
    else if (cfg.trainer.sigma_strategy == "median")
        t.kernel.strategy = hsic::KernelConfig::Strategy::MedianHeuristic;
    else
        throw ConfigError("config: trainer.sigma_strategy must be fixed|median, got '" +
                          cfg.trainer.sigma_strategy + "'");
    t.kernel.sigma = cfg.trainer.sigma;
    t.kernel.sample_fraction = cfg.trainer.sigma_sample_fraction;
    t.kernel.current_sigma_f = cfg.trainer.sigma;
    t.kernel.current_sigma_g = cfg.trainer.sigma;
    if (cfg.trainer.hsic_features == "features")
        t.hsic_on_logits = false;
    else if (cfg.trainer.hsic_features == "logits")
        t.hsic_on_logits = true;
    else
        throw ConfigError("config: trainer.hsic_features must be features|logits, got '" +
                          cfg.trainer.hsic_features + "'");
    t.g_eval_in_f_step = cfg.trainer.g_eval_in_f_step;
    t.g_step_uses_updated_f = cfg.trainer.g_step_uses_updated_f;
    t.inject_nan_step = cfg.trainer.inject_nan_step;
    return t;
}

void validate_config(const ExperimentConfig& cfg) {
    if (cfg.dataset.source != "synthetic" && cfg.dataset.source != "idx")
        throw ConfigError("config: dataset.source must be synthetic|idx, got '" +
                          cfg.dataset.source + "'");
    if (cfg.dataset.source == "idx" && cfg.dataset.idx_dir.empty())
        throw ConfigError("config: dataset.idx_dir is required when dataset.source = idx");
    if (cfg.dataset.train_count < 1 || cfg.dataset.val_count < 1)
        throw ConfigError("config: dataset counts must be >= 1");
    try {
        data::BiasConfig bc;
        bc.rho = cfg.dataset.rho;
        bc.background_threshold = cfg.dataset.background_threshold;
        bc.validate();
        palette_from_config(cfg);
        f_spec_from_config(cfg).validate();
        g_spec_from_config(cfg).validate();
        trainer_from_config(cfg).validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    for (double r : cfg.eval.rhos)
        if (!(r >= 0.0 && r <= 1.0))
            throw ConfigError("config: eval.rhos entries must be in [0,1]");
    for (const auto& m : cfg.eval.methods) {
        try {
            train::kind_from_name(m);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config: eval.methods: ") + e.what());
        }
    }
    if (cfg.eval.n_clusters < 1) throw ConfigError("config: eval.n_clusters must be >= 1");
    if (cfg.eval.batch_size < 1) throw ConfigError("config: eval.batch_size must be >= 1");
    if (cfg.sweep_workers < 1) throw ConfigError("config: sweep.workers must be >= 1");
}

data::SourceDigits load_source(const ExperimentConfig& cfg, data::Split split) {
    if (cfg.dataset.source == "synthetic") {
        const int count =
            split == data::Split::Train ? cfg.dataset.train_count : cfg.dataset.val_count;
        return data::synthetic_digits(nn::mix_seed(cfg.dataset.seed, 0xD16175ULL), count, split);
    }
    namespace fs = std::filesystem;
    const fs::path dir = cfg.dataset.idx_dir;
    const bool tr = split == data::Split::Train;
    const auto images = dir / (tr ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte");
    const auto labels = dir / (tr ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte");
    return data::load_idx(images.string(), labels.string(), split);
}

std::string output_root(const ExperimentConfig& cfg) {
    if (!cfg.output.dir.empty()) return cfg.output.dir;
    if (const char* env = std::getenv("REBIASLAB_OUT"); env != nullptr && env[0] != '\0')
        return env;
    return "out";
}

namespace {

std::string fmt_rho(double rho) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", rho);
    return buf;
}

}  // namespace

std::string dataset_dir(const ExperimentConfig& cfg) {
    if (!cfg.dataset.dir.empty()) return cfg.dataset.dir;
    std::ostringstream os;
    os << output_root(cfg) << "/datasets/" << cfg.dataset.source << "_rho" << fmt_rho(cfg.dataset.rho)
       << "_seed" << cfg.dataset.seed << "_n" << cfg.dataset.train_count;
    return os.str();
}

std::string run_dir(const ExperimentConfig& cfg) {
    if (!cfg.output.run_dir.empty()) return cfg.output.run_dir;
    std::ostringstream os;
    os << output_root(cfg) << "/runs/" << cfg.trainer.kind << "_rho" << fmt_rho(cfg.dataset.rho)
       << "_seed" << cfg.trainer.seed;
    return os.str();
}

}  // namespace rebias::cli
