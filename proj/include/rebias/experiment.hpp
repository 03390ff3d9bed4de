#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "rebias/biasgen.hpp"
#include "rebias/convnet.hpp"
#include "rebias/evalbench.hpp"
#include "rebias/trainers.hpp"

namespace rebias::cli {

// Exit codes (documented in the CLI help).
constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;    // invalid configuration, rejected before any I/O
constexpr int kExitIo = 3;        // missing/corrupt files
constexpr int kExitDiverged = 4;  // training stopped on a gradient explosion

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat key=value configuration; every key has a documented default and unknown
// keys are rejected.
struct ExperimentConfig {
    struct Dataset {
        std::string source = "synthetic";  // synthetic | idx
        std::string idx_dir;               // directory with the canonical IDX files
        int train_count = 60000;
        int val_count = 10000;
        double rho = 0.999;
        std::uint64_t seed = 1;
        int background_threshold = 0;
        std::string palette = "default";  // or "r,g,b;..." (10 triples)
        std::string dir;                  // dataset directory; derived when empty
    } dataset;

    struct Model {
        int f_kernel_size = 7;
        std::vector<int> f_channels = {16, 32, 64, 128};
        std::vector<int> f_pool_after = {2, 4};
        int g_kernel_size = 1;
        std::vector<int> g_channels = {16, 32, 64, 128};
        std::vector<int> g_pool_after = {2, 4};
        int num_classes = 10;
    } model;

    struct Trainer {
        std::string kind = "vanilla";
        int epochs = 80;
        int batch_size = 256;
        double base_lr = 1e-3;
        double lr_decay_factor = 0.1;
        int lr_decay_period = 20;
        double lambda_f = 1.0;
        double lambda_g = 1.0;
        int grad_accum_steps = 1;
        std::uint64_t seed = 1;
        double weight_decay = 0.0;
        double explosion_threshold = 1e4;
        std::string sigma_strategy = "fixed";  // fixed | median
        double sigma = 1.0;
        double sigma_sample_fraction = 0.25;
        std::string hsic_features = "features";  // features | logits
        bool g_eval_in_f_step = true;
        bool g_step_uses_updated_f = true;
        std::int64_t inject_nan_step = -1;  // test hook
    } trainer;

    struct Eval {
        std::vector<double> rhos = {0.999, 0.997, 0.995, 0.99};
        std::vector<std::string> methods = {"vanilla", "biased", "rubi", "rebias"};
        std::vector<std::uint64_t> seeds = {1, 2, 3};
        int n_clusters = 9;
        int batch_size = 512;
    } eval;

    struct Output {
        std::string dir;      // output root; REBIASLAB_OUT or ./out when empty
        std::string run_dir;  // run directory; derived when empty
    } output;

    int sweep_workers = 1;
};

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

// Schema-driven serialization; parse(render(c)) == c.
std::string render_config(const ExperimentConfig& cfg);
ExperimentConfig parse_config(const std::string& text);
void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value);
std::string config_help();  // key, default and one-line doc per entry
void validate_config(const ExperimentConfig& cfg);  // throws ConfigError

// Derived pieces
data::BiasPalette palette_from_config(const ExperimentConfig& cfg);
nn::ConvNetSpec f_spec_from_config(const ExperimentConfig& cfg);
nn::ConvNetSpec g_spec_from_config(const ExperimentConfig& cfg);
train::TrainerConfig trainer_from_config(const ExperimentConfig& cfg);
data::SourceDigits load_source(const ExperimentConfig& cfg, data::Split split);
std::string output_root(const ExperimentConfig& cfg);
std::string dataset_dir(const ExperimentConfig& cfg);
std::string run_dir(const ExperimentConfig& cfg);

extern const char* kArtifactVersion;

// Commands. Logs go to `log`; failures map to the exit codes above.
int cmd_generate(const ExperimentConfig& cfg, std::ostream& log);
int cmd_train(const ExperimentConfig& cfg, std::ostream& log);
int cmd_evaluate(const std::string& run_directory, std::ostream& log);
int cmd_sweep(const ExperimentConfig& cfg, std::ostream& log);
int cmd_report(const std::string& metrics_csv_path, const std::string& out_dir, std::ostream& log);

// report helpers (used by cmd_sweep as well)
std::string format_report_tables(const bench::MetricsTable& table);
std::string format_rho_curve(const bench::MetricsTable& table);

}  // namespace rebias::cli
