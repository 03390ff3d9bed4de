#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rebias/biasgen.hpp"
#include "rebias/convnet.hpp"
#include "rebias/trainers.hpp"

namespace rebias::bench {

struct EvalReport {
    std::string method;
    double rho = 0.0;
    std::uint64_t seed = 0;
    double biased_accuracy = 0.0;    // percent
    double unbiased_accuracy = 0.0;  // percent
    bool diverged = false;
};

struct MetricsTable {
    std::vector<EvalReport> rows;

    std::string to_csv() const;  // header: method,rho,seed,biased_acc,unbiased_acc,diverged
    static MetricsTable from_csv(const std::string& text);
};

bool operator==(const EvalReport& a, const EvalReport& b);
bool operator==(const MetricsTable& a, const MetricsTable& b);

struct AggregateCell {
    std::string method;
    double rho = 0.0;
    double mean_biased = 0.0, std_biased = 0.0;
    double mean_unbiased = 0.0, std_unbiased = 0.0;
    int count = 0;
    bool any_diverged = false;
};

// Mean and sample standard deviation per (method, rho); a single report
// aggregates to (value, 0) by convention.
std::vector<AggregateCell> aggregate_runs(const MetricsTable& table);

// Top-1 accuracy in percent, evaluation mode, ties broken toward the lowest class.
double accuracy(const nn::ConvNetSpec& spec, const nn::ModelParams<float>& params,
                const data::BiasedDataset& dataset, int batch_size = 512);

// Validation seeds are derived from the dataset seed, independent of training.
std::uint64_t validation_seed(std::uint64_t dataset_seed, bool unbiased);

constexpr double kUnbiasedRho = 0.1;  // uniform color marginal

// Biased accuracy at the training rho and unbiased accuracy at rho = 0.1, both
// rendered from the validation split of the source corpus.
EvalReport evaluate_pair(const nn::ConvNetSpec& spec, const nn::ModelParams<float>& params,
                         const std::string& method, double rho_train, std::uint64_t seed,
                         const data::SourceDigits& val_source, const data::BiasPalette& palette,
                         std::uint64_t dataset_seed, int background_threshold, bool diverged);

// Deterministic k-means with k-means++ seeding; ties go to the lowest cluster
// index, empty clusters keep their previous centroid.
std::vector<int> kmeans(const std::vector<std::vector<double>>& points, int k,
                        std::mt19937_64& rng, int max_iter = 100, double tol = 1e-6);

struct ClusterReport {
    int n_clusters = 9;
    std::vector<double> per_cluster_accuracy;  // -1 marks an empty cluster
    std::vector<int> cluster_sizes;
    double mean = 0.0;  // unweighted mean over non-empty clusters
    int empty_clusters = 0;
};

// Cluster images by the Gram matrix of the first conv layer's feature maps
// (L2-normalized channel-by-channel inner products), then average per-cluster
// accuracies uniformly.
ClusterReport texture_cluster_unbiased_accuracy(const nn::ConvNetSpec& spec,
                                                const nn::ModelParams<float>& params,
                                                const data::BiasedDataset& dataset,
                                                int n_clusters, std::mt19937_64& rng,
                                                int batch_size = 512);

// Texture descriptors only (exposed for clustering diagnostics/tests).
std::vector<std::vector<double>> texture_descriptors(const nn::ConvNetSpec& spec,
                                                     const nn::ModelParams<float>& params,
                                                     const data::BiasedDataset& dataset,
                                                     int batch_size = 512);

struct SweepRequest {
    std::vector<train::Kind> methods;
    std::vector<double> rhos;
    std::vector<std::uint64_t> seeds;
    train::TrainerConfig base_trainer;
    nn::ConvNetSpec f_spec, g_spec;
    std::uint64_t dataset_seed = 1;
    int background_threshold = 0;
    data::BiasPalette palette = data::BiasPalette::defaults();
};

// In-memory rho x method x seed grid: trains each cell independently and
// evaluates it; diverged runs appear flagged, never dropped.
MetricsTable rho_sweep(const SweepRequest& req, const data::SourceDigits& train_source,
                       const data::SourceDigits& val_source,
                       const std::function<void(const EvalReport&)>& on_cell = nullptr);

}  // namespace rebias::bench
