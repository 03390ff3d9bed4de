#include "rebias/biasgen.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace rebias::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

BiasPalette BiasPalette::defaults() {
    BiasPalette p;
    for (int k = 0; k < kNumClasses; ++k) {
        // HSV (36k degrees, 1, 1) -> RGB
        const double hp = 36.0 * k / 60.0;
        const double x = 255.0 * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
        const auto xi = static_cast<std::uint8_t>(std::lround(x));
        std::array<std::uint8_t, 3> rgb{};
        switch (static_cast<int>(hp)) {
            case 0: rgb = {255, xi, 0}; break;
            case 1: rgb = {xi, 255, 0}; break;
            case 2: rgb = {0, 255, xi}; break;
            case 3: rgb = {0, xi, 255}; break;
            case 4: rgb = {xi, 0, 255}; break;
            default: rgb = {255, 0, xi}; break;
        }
        p.colors[static_cast<std::size_t>(k)] = rgb;
    }
    return p;
}

void BiasPalette::validate() const {
    for (int i = 0; i < kNumClasses; ++i)
        for (int j = i + 1; j < kNumClasses; ++j) {
            double d2 = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double d = static_cast<double>(colors[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]) -
                                 static_cast<double>(colors[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)]);
                d2 += d * d;
            }
            if (d2 < 60.0 * 60.0)
                throw std::invalid_argument(
                    "BiasPalette: colors " + std::to_string(i) + " and " + std::to_string(j) +
                    " are too close (need pairwise RGB distance >= 60)");
        }
}

bool operator==(const BiasPalette& a, const BiasPalette& b) { return a.colors == b.colors; }

void BiasConfig::validate() const {
    if (!(rho >= 0.0 && rho <= 1.0))
        throw std::invalid_argument("BiasConfig: rho must be in [0,1], got " + std::to_string(rho));
    if (background_threshold < 0 || background_threshold > 255)
        throw std::invalid_argument("BiasConfig: background_threshold must be in [0,255]");
}

bool operator==(const BiasConfig& a, const BiasConfig& b) {
    return a.rho == b.rho && a.split == b.split && a.seed == b.seed &&
           a.background_threshold == b.background_threshold;
}

const char* split_name(Split s) { return s == Split::Train ? "train" : "val"; }

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "val") return Split::Val;
    throw std::invalid_argument("unknown split '" + name + "' (want train|val)");
}

int assign_color(int digit_label, double rho, std::mt19937_64& rng) {
    if (digit_label < 0 || digit_label >= kNumClasses)
        throw std::invalid_argument("assign_color: digit label out of range");
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    if (u < rho) return digit_label;
    const int other = static_cast<int>(rng() % (kNumClasses - 1));
    return other < digit_label ? other : other + 1;
}

void render(const std::uint8_t* gray, const std::array<std::uint8_t, 3>& color,
            int background_threshold, std::uint8_t* out_rgb) {
    for (int p = 0; p < kImagePixels; ++p) {
        const int g = gray[p];
        if (g <= background_threshold) {
            for (int c = 0; c < 3; ++c) out_rgb[c * kImagePixels + p] = color[static_cast<std::size_t>(c)];
        } else {
            const double alpha = g / 255.0;
            for (int c = 0; c < 3; ++c) {
                const double v = alpha * g + (1.0 - alpha) * color[static_cast<std::size_t>(c)];
                out_rgb[c * kImagePixels + p] = static_cast<std::uint8_t>(std::lround(v));
            }
        }
    }
}

BiasedDataset build_dataset(const BiasConfig& config, const BiasPalette& palette,
                            const SourceDigits& source) {
    config.validate();
    palette.validate();
    if (source.size() == 0) throw std::invalid_argument("build_dataset: empty source digit set");
    if (source.labels.size() != source.size() || source.indices.size() != source.size())
        throw std::invalid_argument("build_dataset: source arrays disagree in length");
    for (std::size_t i = 0; i < source.size(); ++i)
        if (source.labels[i] >= kNumClasses)
            throw std::invalid_argument("build_dataset: malformed source image at index " +
                                        std::to_string(i) + " (label out of range)");

    BiasedDataset ds;
    ds.config = config;
    ds.palette = palette;
    ds.samples.resize(source.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(source.size()); ++i) {
        auto rng = nn::make_rng(nn::mix_seed(config.seed, static_cast<std::uint64_t>(i)));
        auto& s = ds.samples[static_cast<std::size_t>(i)];
        s.digit_label = source.labels[static_cast<std::size_t>(i)];
        s.color_label = static_cast<std::uint8_t>(assign_color(s.digit_label, config.rho, rng));
        s.source_index = source.indices[static_cast<std::size_t>(i)];
        render(source.images[static_cast<std::size_t>(i)].data(),
               palette.colors[s.color_label], config.background_threshold, s.image.data());
    }
    return ds;
}

std::uint64_t BiasedDataset::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const std::uint8_t* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& s : samples) {
        feed(s.image.data(), s.image.size());
        feed(&s.digit_label, 1);
        feed(&s.color_label, 1);
    }
    return h;
}

BiasAudit bias_audit(const BiasedDataset& dataset) {
    std::vector<std::uint8_t> digits, colors;
    digits.reserve(dataset.samples.size());
    colors.reserve(dataset.samples.size());
    for (const auto& s : dataset.samples) {
        digits.push_back(s.digit_label);
        colors.push_back(s.color_label);
    }
    return bias_audit_labels(digits, colors);
}

BiasAudit bias_audit_labels(const std::vector<std::uint8_t>& digit_labels,
                            const std::vector<std::uint8_t>& color_labels) {
    if (digit_labels.empty() || digit_labels.size() != color_labels.size())
        throw std::invalid_argument("bias_audit: empty dataset or mismatched label arrays");
    BiasAudit a;
    std::array<std::array<std::int64_t, kNumClasses>, kNumClasses> joint{};
    for (std::size_t i = 0; i < digit_labels.size(); ++i) {
        if (digit_labels[i] >= kNumClasses || color_labels[i] >= kNumClasses)
            throw std::invalid_argument("bias_audit: label out of range");
        joint[digit_labels[i]][color_labels[i]] += 1;
    }

    const double total = static_cast<double>(digit_labels.size());
    std::array<double, kNumClasses> color_marginal{};
    for (int d = 0; d < kNumClasses; ++d) {
        std::int64_t row = 0;
        for (int c = 0; c < kNumClasses; ++c) {
            row += joint[static_cast<std::size_t>(d)][static_cast<std::size_t>(c)];
            color_marginal[static_cast<std::size_t>(c)] +=
                joint[static_cast<std::size_t>(d)][static_cast<std::size_t>(c)];
        }
        a.class_counts[static_cast<std::size_t>(d)] = row;
        a.preassigned_rate[static_cast<std::size_t>(d)] =
            row > 0 ? static_cast<double>(joint[static_cast<std::size_t>(d)][static_cast<std::size_t>(d)]) / row
                    : 0.0;
    }
    double mi = 0.0;
    for (int d = 0; d < kNumClasses; ++d)
        for (int c = 0; c < kNumClasses; ++c) {
            const double pij = joint[static_cast<std::size_t>(d)][static_cast<std::size_t>(c)] / total;
            if (pij <= 0.0) continue;
            const double pi = a.class_counts[static_cast<std::size_t>(d)] / total;
            const double pj = color_marginal[static_cast<std::size_t>(c)] / total;
            mi += pij * std::log(pij / (pi * pj));
        }
    a.mutual_information_nats = mi;
    return a;
}

// --- on-disk container ---

namespace {
constexpr std::size_t kRecordSize = 3 * kImagePixels + 2 + 8;
}

void save_dataset(const BiasedDataset& dataset, const std::string& dir) {
    fs::create_directories(dir);
    {
        std::ofstream os(fs::path(dir) / "samples.bin", std::ios::binary);
        if (!os) throw std::runtime_error("save_dataset: cannot write " + dir + "/samples.bin");
        for (const auto& s : dataset.samples) {
            os.write(reinterpret_cast<const char*>(s.image.data()),
                     static_cast<std::streamsize>(s.image.size()));
            os.put(static_cast<char>(s.digit_label));
            os.put(static_cast<char>(s.color_label));
            os.write(reinterpret_cast<const char*>(&s.source_index), 8);
        }
        if (!os) throw std::runtime_error("save_dataset: write failed in " + dir);
    }
    json manifest;
    manifest["format_version"] = 1;
    manifest["config"] = {{"rho", dataset.config.rho},
                          {"split", split_name(dataset.config.split)},
                          {"seed", dataset.config.seed},
                          {"background_threshold", dataset.config.background_threshold}};
    json pal = json::array();
    for (const auto& c : dataset.palette.colors) pal.push_back({c[0], c[1], c[2]});
    manifest["palette"] = pal;
    manifest["num_samples"] = dataset.samples.size();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(dataset.checksum()));
    manifest["checksum"] = buf;
    std::ofstream ms(fs::path(dir) / "manifest.json");
    ms << manifest.dump(2) << "\n";
}

BiasedDataset load_dataset(const std::string& dir) {
    std::ifstream ms(fs::path(dir) / "manifest.json");
    if (!ms) throw std::runtime_error("load_dataset: missing " + dir + "/manifest.json");
    json manifest = json::parse(ms);

    BiasedDataset ds;
    ds.config.rho = manifest.at("config").at("rho").get<double>();
    ds.config.split = split_from_name(manifest.at("config").at("split").get<std::string>());
    ds.config.seed = manifest.at("config").at("seed").get<std::uint64_t>();
    ds.config.background_threshold = manifest.at("config").at("background_threshold").get<int>();
    const auto& pal = manifest.at("palette");
    for (int k = 0; k < kNumClasses; ++k)
        for (int c = 0; c < 3; ++c)
            ds.palette.colors[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)] =
                pal.at(static_cast<std::size_t>(k)).at(static_cast<std::size_t>(c)).get<std::uint8_t>();

    const auto n = manifest.at("num_samples").get<std::size_t>();
    std::ifstream is(fs::path(dir) / "samples.bin", std::ios::binary);
    if (!is) throw std::runtime_error("load_dataset: missing " + dir + "/samples.bin");
    ds.samples.resize(n);
    for (auto& s : ds.samples) {
        if (!is.read(reinterpret_cast<char*>(s.image.data()),
                     static_cast<std::streamsize>(s.image.size())))
            throw std::runtime_error("load_dataset: truncated samples.bin in " + dir);
        s.digit_label = static_cast<std::uint8_t>(is.get());
        s.color_label = static_cast<std::uint8_t>(is.get());
        if (!is.read(reinterpret_cast<char*>(&s.source_index), 8))
            throw std::runtime_error("load_dataset: truncated samples.bin in " + dir);
    }
    char extra;
    if (is.read(&extra, 1))
        throw std::runtime_error("load_dataset: trailing bytes in " + dir + "/samples.bin");

    const std::string want = manifest.at("checksum").get<std::string>();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(ds.checksum()));
    if (want != buf)
        throw std::runtime_error("load_dataset: checksum mismatch in " + dir +
                                 " (manifest " + want + ", data " + buf + ")");
    static_assert(kRecordSize == 3 * kImagePixels + 10);
    return ds;
}

nn::Tensor<float> to_batch(const BiasedDataset& dataset, const std::vector<int>& sample_indices) {
    const int n = static_cast<int>(sample_indices.size());
    nn::Tensor<float> batch({n, 3, kImageSide, kImageSide});
    for (int i = 0; i < n; ++i) {
        const auto& s = dataset.samples[static_cast<std::size_t>(sample_indices[static_cast<std::size_t>(i)])];
        float* dst = batch.data() + static_cast<std::ptrdiff_t>(i) * 3 * kImagePixels;
        for (int j = 0; j < 3 * kImagePixels; ++j)
            dst[j] = static_cast<float>(s.image[static_cast<std::size_t>(j)]) / 255.0f;
    }
    return batch;
}

std::vector<int> batch_labels(const BiasedDataset& dataset,
                              const std::vector<int>& sample_indices) {
    std::vector<int> labels(sample_indices.size());
    for (std::size_t i = 0; i < sample_indices.size(); ++i)
        labels[i] = dataset.samples[static_cast<std::size_t>(sample_indices[i])].digit_label;
    return labels;
}

}  // namespace rebias::data
