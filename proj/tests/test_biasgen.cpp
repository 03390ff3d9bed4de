#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "rebias/biasgen.hpp"

using namespace rebias;
using namespace rebias::data;

namespace {

// two-sided binomial check via the normal approximation at significance 0.001
bool binomial_ok(std::int64_t k, std::int64_t n, double p) {
    if (p <= 0.0) return k == 0;
    if (p >= 1.0) return k == n;
    const double z = std::abs(static_cast<double>(k) - n * p) / std::sqrt(n * p * (1.0 - p));
    return z <= 3.29;
}

// chi-square statistic of the per-class color histogram against uniform
double chi2_uniform(const std::array<std::int64_t, 10>& counts) {
    std::int64_t total = 0;
    for (auto c : counts) total += c;
    const double expected = static_cast<double>(total) / 10.0;
    double stat = 0.0;
    for (auto c : counts) stat += (c - expected) * (c - expected) / expected;
    return stat;
}

}  // namespace

TEST_CASE("default palette is distinct and well separated") {
    const auto p = BiasPalette::defaults();
    p.validate();
    std::set<std::array<std::uint8_t, 3>> unique(p.colors.begin(), p.colors.end());
    CHECK(unique.size() == 10);
    for (int i = 0; i < 10; ++i)
        for (int j = i + 1; j < 10; ++j) {
            double d2 = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double d = static_cast<double>(p.colors[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]) -
                                 p.colors[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];
                d2 += d * d;
            }
            CHECK(std::sqrt(d2) >= 60.0);
        }

    BiasPalette bad = p;
    bad.colors[1] = bad.colors[0];
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("assign_color honors rho") {
    SUBCASE("rho = 1 always returns the preassigned color") {
        auto rng = nn::make_rng(1);
        for (int i = 0; i < 1000; ++i) CHECK(assign_color(i % 10, 1.0, rng) == i % 10);
    }
    SUBCASE("rho = 0.999 concentrates within the binomial 3-sigma interval") {
        auto rng = nn::make_rng(2);
        std::int64_t hits = 0;
        const int draws = 100000;
        for (int i = 0; i < draws; ++i)
            if (assign_color(3, 0.999, rng) == 3) ++hits;
        const double freq = static_cast<double>(hits) / draws;
        CHECK(freq >= 0.9985);
        CHECK(freq <= 0.9995);
    }
    SUBCASE("rho = 0.1 makes every color equally likely") {
        auto rng = nn::make_rng(3);
        std::array<std::int64_t, 10> counts{};
        const int draws = 100000;
        for (int i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(assign_color(4, 0.1, rng))];
        for (auto c : counts) CHECK(binomial_ok(c, draws, 0.1));
    }
    SUBCASE("off-preassigned draws are uniform over the other nine") {
        auto rng = nn::make_rng(4);
        std::array<std::int64_t, 10> counts{};
        const int draws = 90000;
        for (int i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(assign_color(7, 0.0, rng))];
        CHECK(counts[7] == 0);
        for (int c = 0; c < 10; ++c)
            if (c != 7) CHECK(binomial_ok(counts[static_cast<std::size_t>(c)], draws, 1.0 / 9.0));
    }
}

TEST_CASE("render covers background and preserves strokes") {
    const std::array<std::uint8_t, 3> red = {255, 0, 0};
    std::array<std::uint8_t, kImagePixels> gray{};
    std::array<std::uint8_t, 3 * kImagePixels> rgb{};

    SUBCASE("blank image becomes exactly the background color") {
        render(gray.data(), red, 0, rgb.data());
        for (int p = 0; p < kImagePixels; ++p) {
            CHECK(rgb[static_cast<std::size_t>(p)] == 255);
            CHECK(rgb[static_cast<std::size_t>(kImagePixels + p)] == 0);
            CHECK(rgb[static_cast<std::size_t>(2 * kImagePixels + p)] == 0);
        }
    }
    SUBCASE("full-intensity strokes hide the background entirely") {
        gray.fill(255);
        render(gray.data(), red, 0, rgb.data());
        for (auto v : rgb) CHECK(v == 255);
    }
    SUBCASE("background pixel count matches the source") {
        const auto src = synthetic_digits(11, 10, Split::Train);
        const auto& img = src.images[7];
        const std::array<std::uint8_t, 3> bg = {0, 255, 102};
        render(img.data(), bg, 0, rgb.data());
        int source_bg = 0, rendered_bg = 0;
        for (int p = 0; p < kImagePixels; ++p) {
            if (img[static_cast<std::size_t>(p)] == 0) ++source_bg;
            if (rgb[static_cast<std::size_t>(p)] == bg[0] &&
                rgb[static_cast<std::size_t>(kImagePixels + p)] == bg[1] &&
                rgb[static_cast<std::size_t>(2 * kImagePixels + p)] == bg[2])
                ++rendered_bg;
        }
        CHECK(source_bg > 100);  // sanity: the stroke does not fill the image
        CHECK(rendered_bg == source_bg);
    }
}

TEST_CASE("synthetic digits are deterministic with uniform classes") {
    const auto a = synthetic_digits(5, 100, Split::Train);
    const auto b = synthetic_digits(5, 100, Split::Train);
    CHECK(a.images == b.images);
    CHECK(a.labels == b.labels);
    std::array<int, 10> counts{};
    for (auto l : a.labels) ++counts[l];
    for (auto c : counts) CHECK(c == 10);

    // train and val index ranges are disjoint
    const auto v = synthetic_digits(5, 100, Split::Val);
    std::set<std::int64_t> ti(a.indices.begin(), a.indices.end());
    for (auto idx : v.indices) CHECK(ti.count(idx) == 0);

    // ink fraction is sane: a stroke exists, most of the canvas is background
    for (int i = 0; i < 10; ++i) {
        int ink = 0;
        for (auto px : a.images[static_cast<std::size_t>(i)])
            if (px > 0) ++ink;
        CHECK(ink > 15);
        CHECK(ink < 400);
    }
}

TEST_CASE("build_dataset basics") {
    const auto palette = BiasPalette::defaults();
    const auto source = synthetic_digits(1, 200, Split::Train);

    SUBCASE("rho = 1 pins every color to the digit") {
        BiasConfig cfg;
        cfg.rho = 1.0;
        const auto ds = build_dataset(cfg, palette, source);
        for (const auto& s : ds.samples) CHECK(s.color_label == s.digit_label);
    }
    SUBCASE("equal seeds give byte-identical datasets") {
        BiasConfig cfg;
        cfg.rho = 0.7;
        cfg.seed = 99;
        const auto d1 = build_dataset(cfg, palette, source);
        const auto d2 = build_dataset(cfg, palette, source);
        CHECK(d1.checksum() == d2.checksum());
        REQUIRE(d1.samples.size() == d2.samples.size());
        for (std::size_t i = 0; i < d1.samples.size(); ++i)
            CHECK(d1.samples[i].image == d2.samples[i].image);
        cfg.seed = 100;
        CHECK(build_dataset(cfg, palette, source).checksum() != d1.checksum());
    }
    SUBCASE("labels always match the source") {
        BiasConfig cfg;
        cfg.rho = 0.3;
        const auto ds = build_dataset(cfg, palette, source);
        for (std::size_t i = 0; i < ds.samples.size(); ++i) {
            CHECK(ds.samples[i].digit_label == source.labels[i]);
            CHECK(ds.samples[i].source_index == source.indices[i]);
        }
    }
    SUBCASE("malformed source is rejected with the index") {
        auto bad = source;
        bad.labels[13] = 12;
        BiasConfig cfg;
        CHECK_THROWS_WITH_AS(void(build_dataset(cfg, palette, bad)), doctest::Contains("13"),
                             std::invalid_argument);
    }
    SUBCASE("rho outside [0,1] is rejected") {
        BiasConfig cfg;
        cfg.rho = 1.5;
        CHECK_THROWS_AS(void(build_dataset(cfg, palette, source)), std::invalid_argument);
    }
}

TEST_CASE("bias audit on a 60000-sample build") {
    const auto palette = BiasPalette::defaults();
    const auto source = synthetic_digits(21, 60000, Split::Train);

    SUBCASE("rho = 0.999: crossed fraction and per-digit rates") {
        BiasConfig cfg;
        cfg.rho = 0.999;
        cfg.seed = 31;
        const auto ds = build_dataset(cfg, palette, source);
        std::int64_t crossed = 0;
        for (const auto& s : ds.samples)
            if (s.color_label != s.digit_label) ++crossed;
        const double frac = static_cast<double>(crossed) / static_cast<double>(ds.samples.size());
        CHECK(frac >= 0.0002);
        CHECK(frac <= 0.002);
        const auto audit = bias_audit(ds);
        for (double rate : audit.preassigned_rate) {
            CHECK(rate >= 0.995);
            CHECK(rate <= 1.0);
        }
    }
    SUBCASE("rho = 1 gives mutual information ln(10) exactly") {
        BiasConfig cfg;
        cfg.rho = 1.0;
        const auto audit = bias_audit(build_dataset(cfg, palette, source));
        CHECK(audit.mutual_information_nats == doctest::Approx(std::log(10.0)).epsilon(1e-12));
    }
    SUBCASE("rho = 0.1 is independent: tiny mutual information, uniform colors") {
        BiasConfig cfg;
        cfg.rho = 0.1;
        cfg.seed = 33;
        const auto ds = build_dataset(cfg, palette, source);
        const auto audit = bias_audit(ds);
        CHECK(audit.mutual_information_nats <= 0.01);
        std::array<std::array<std::int64_t, 10>, 10> joint{};
        for (const auto& s : ds.samples) ++joint[s.digit_label][s.color_label];
        for (int d = 0; d < 10; ++d)
            CHECK(chi2_uniform(joint[static_cast<std::size_t>(d)]) <= 27.877);  // df=9, alpha=0.001
    }
    SUBCASE("binomial distribution checks at several rho values") {
        for (const double rho : {1.0, 0.999, 0.5, 0.1}) {
            BiasConfig cfg;
            cfg.rho = rho;
            cfg.seed = 37;
            const auto ds = build_dataset(cfg, palette, source);
            std::array<std::int64_t, 10> hits{}, totals{};
            for (const auto& s : ds.samples) {
                ++totals[s.digit_label];
                if (s.color_label == s.digit_label) ++hits[s.digit_label];
            }
            for (int d = 0; d < 10; ++d)
                CHECK(binomial_ok(hits[static_cast<std::size_t>(d)],
                                  totals[static_cast<std::size_t>(d)], rho));
        }
    }
}

TEST_CASE("idx reader") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "rebias_idx_test";
    fs::create_directories(dir);
    const auto img_path = (dir / "imgs").string();
    const auto lbl_path = (dir / "lbls").string();

    auto write_fixture = [&](std::uint32_t img_magic, std::uint32_t lbl_magic, int n,
                             bool truncate_labels) {
        auto be = [](std::ofstream& os, std::uint32_t v) {
            const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                                        static_cast<unsigned char>(v >> 16),
                                        static_cast<unsigned char>(v >> 8),
                                        static_cast<unsigned char>(v)};
            os.write(reinterpret_cast<const char*>(b), 4);
        };
        {
            std::ofstream os(img_path, std::ios::binary | std::ios::trunc);
            be(os, img_magic);
            be(os, static_cast<std::uint32_t>(n));
            be(os, 28);
            be(os, 28);
            for (int i = 0; i < n; ++i)
                for (int p = 0; p < kImagePixels; ++p)
                    os.put(static_cast<char>((i * 7 + p) % 251));
        }
        {
            std::ofstream os(lbl_path, std::ios::binary | std::ios::trunc);
            be(os, lbl_magic);
            be(os, static_cast<std::uint32_t>(n));
            const int count = truncate_labels ? n - 1 : n;
            for (int i = 0; i < count; ++i) os.put(static_cast<char>(i % 10));
        }
    };

    write_fixture(0x803, 0x801, 3, false);
    const auto src = load_idx(img_path, lbl_path, Split::Val);
    CHECK(src.size() == 3);
    CHECK(src.labels == std::vector<std::uint8_t>{0, 1, 2});
    CHECK(src.images[1][5] == (7 + 5) % 251);
    CHECK(src.indices[0] >= (std::int64_t{1} << 32));  // val range

    write_fixture(0x804, 0x801, 3, false);
    CHECK_THROWS_WITH_AS(void(load_idx(img_path, lbl_path, Split::Train)),
                         doctest::Contains("bad magic"), std::runtime_error);
    write_fixture(0x803, 0x801, 3, true);
    CHECK_THROWS_WITH_AS(void(load_idx(img_path, lbl_path, Split::Train)),
                         doctest::Contains("truncated"), std::runtime_error);
    CHECK_THROWS_AS(void(load_idx((dir / "missing").string(), lbl_path, Split::Train)),
                    std::runtime_error);
    fs::remove_all(dir);
}

TEST_CASE("dataset directory round-trip with checksum guard") {
    namespace fs = std::filesystem;
    const auto dir = (fs::temp_directory_path() / "rebias_ds_test").string();

    const auto source = synthetic_digits(2, 50, Split::Train);
    BiasConfig cfg;
    cfg.rho = 0.9;
    cfg.seed = 5;
    const auto ds = build_dataset(cfg, BiasPalette::defaults(), source);
    save_dataset(ds, dir);
    const auto back = load_dataset(dir);
    CHECK(back.checksum() == ds.checksum());
    CHECK(back.config == ds.config);
    CHECK(back.palette == ds.palette);
    REQUIRE(back.samples.size() == ds.samples.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        CHECK(back.samples[i].image == ds.samples[i].image);
        CHECK(back.samples[i].digit_label == ds.samples[i].digit_label);
        CHECK(back.samples[i].color_label == ds.samples[i].color_label);
        CHECK(back.samples[i].source_index == ds.samples[i].source_index);
    }

    // flip one byte: the checksum guard must trip
    {
        std::fstream f(fs::path(dir) / "samples.bin",
                       std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(100);
        f.put('\x7f');
    }
    CHECK_THROWS_WITH_AS(void(load_dataset(dir)), doctest::Contains("checksum"),
                         std::runtime_error);
    fs::remove_all(dir);
}

TEST_CASE("to_batch scales to the unit interval") {
    const auto source = synthetic_digits(3, 10, Split::Train);
    BiasConfig cfg;
    const auto ds = build_dataset(cfg, BiasPalette::defaults(), source);
    const auto batch = to_batch(ds, {0, 3, 5});
    CHECK(batch.shape == std::vector<int>{3, 3, 28, 28});
    for (float v : batch.values) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    const auto labels = batch_labels(ds, {0, 3, 5});
    CHECK(labels == std::vector<int>{ds.samples[0].digit_label, ds.samples[3].digit_label,
                                     ds.samples[5].digit_label});
}
