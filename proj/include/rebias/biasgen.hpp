#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rebias/tensor.hpp"

namespace rebias::data {

constexpr int kImageSide = 28;
constexpr int kImagePixels = kImageSide * kImageSide;
constexpr int kNumClasses = 10;

// Ten visually distinct background colors, one preassigned per digit.
struct BiasPalette {
    std::array<std::array<std::uint8_t, 3>, kNumClasses> colors;

    static BiasPalette defaults();  // evenly spaced hue wheel at full saturation/value
    void validate() const;          // distinct, pairwise RGB distance >= 60
};

bool operator==(const BiasPalette& a, const BiasPalette& b);

enum class Split { Train, Val };

struct BiasConfig {
    double rho = 0.999;  // probability of the preassigned color
    Split split = Split::Train;
    std::uint64_t seed = 1;
    int background_threshold = 0;  // grayscale cutoff for background pixels

    void validate() const;
};

bool operator==(const BiasConfig& a, const BiasConfig& b);

// Source corpus of grayscale digits: the canonical IDX files or the built-in
// procedural renderer. Indices are globally unique so train/val hygiene is
// checkable downstream.
struct SourceDigits {
    std::vector<std::array<std::uint8_t, kImagePixels>> images;
    std::vector<std::uint8_t> labels;
    std::vector<std::int64_t> indices;

    std::size_t size() const { return images.size(); }
};

struct BiasedSample {
    std::array<std::uint8_t, 3 * kImagePixels> image;  // RGB, channel-major
    std::uint8_t digit_label = 0;
    std::uint8_t color_label = 0;  // palette index actually rendered
    std::int64_t source_index = 0;
};

struct BiasedDataset {
    std::vector<BiasedSample> samples;
    BiasConfig config;
    BiasPalette palette;

    std::uint64_t checksum() const;  // FNV-1a over sample bytes in order
};

// Preassigned color with probability rho, otherwise uniform over the other nine.
int assign_color(int digit_label, double rho, std::mt19937_64& rng);

// Background pixels take the palette color; stroke pixels blend their gray
// intensity over it with alpha = intensity/255.
void render(const std::uint8_t* gray, const std::array<std::uint8_t, 3>& color,
            int background_threshold, std::uint8_t* out_rgb);

// Pure function of (config, palette, source); per-sample generators are derived
// from (seed, sample index) so construction may run in any order.
BiasedDataset build_dataset(const BiasConfig& config, const BiasPalette& palette,
                            const SourceDigits& source);

struct BiasAudit {
    std::array<double, kNumClasses> preassigned_rate{};  // per digit class
    double mutual_information_nats = 0.0;                // plug-in estimate
    std::array<std::int64_t, kNumClasses> class_counts{};
};

BiasAudit bias_audit(const BiasedDataset& dataset);
BiasAudit bias_audit_labels(const std::vector<std::uint8_t>& digit_labels,
                            const std::vector<std::uint8_t>& color_labels);

// --- sources ---

// Procedurally rendered digits; split selects a disjoint global index range.
SourceDigits synthetic_digits(std::uint64_t seed, int count, Split split);

// Canonical big-endian IDX image/label pair.
SourceDigits load_idx(const std::string& images_path, const std::string& labels_path,
                      Split split);

// --- on-disk dataset container ---

// Directory layout: manifest.json (config, palette, checksum) + samples.bin.
void save_dataset(const BiasedDataset& dataset, const std::string& dir);
BiasedDataset load_dataset(const std::string& dir);

// Batch conversion: uint8 RGB -> float in [0,1], shape (n, 3, 28, 28).
nn::Tensor<float> to_batch(const BiasedDataset& dataset, const std::vector<int>& sample_indices);
std::vector<int> batch_labels(const BiasedDataset& dataset, const std::vector<int>& sample_indices);

const char* split_name(Split s);
Split split_from_name(const std::string& name);

}  // namespace rebias::data
