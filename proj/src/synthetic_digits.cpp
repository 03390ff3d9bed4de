#include "rebias/biasgen.hpp"

#include <cmath>
#include <vector>

// Procedural grayscale digits: each class is a fixed stroke skeleton in the
// unit square, rendered with per-sample affine jitter and anti-aliased
// distance-field strokes. Keeps the generator self-contained so experiments
// and tests run without downloading a corpus.

namespace rebias::data {

namespace {

struct P {
    double x, y;
};

using Stroke = std::vector<P>;

Stroke arc(P center, double rx, double ry, double a0, double a1, int segs = 20) {
    Stroke s;
    for (int i = 0; i <= segs; ++i) {
        const double t = a0 + (a1 - a0) * i / segs;
        s.push_back({center.x + rx * std::cos(t), center.y + ry * std::sin(t)});
    }
    return s;
}

// Angles measured with y pointing down the canvas.
std::vector<Stroke> digit_skeleton(int digit) {
    constexpr double pi = 3.14159265358979323846;
    switch (digit) {
        case 0:
            return {arc({0.50, 0.50}, 0.26, 0.36, 0.0, 2.0 * pi, 28)};
        case 1:
            return {{{0.34, 0.30}, {0.52, 0.14}}, {{0.52, 0.14}, {0.52, 0.86}}};
        case 2: {
            Stroke top = arc({0.50, 0.34}, 0.22, 0.20, -pi, 0.15 * pi, 14);
            top.push_back({0.30, 0.84});
            return {top, {{0.30, 0.84}, {0.74, 0.84}}};
        }
        case 3:
            return {arc({0.46, 0.32}, 0.21, 0.18, -0.85 * pi, 0.5 * pi, 14),
                    arc({0.46, 0.68}, 0.23, 0.20, -0.5 * pi, 0.85 * pi, 14)};
        case 4:
            return {{{0.62, 0.14}, {0.28, 0.60}}, {{0.28, 0.60}, {0.78, 0.60}},
                    {{0.62, 0.14}, {0.62, 0.86}}};
        case 5:
            return {{{0.70, 0.14}, {0.34, 0.14}}, {{0.34, 0.14}, {0.32, 0.46}},
                    arc({0.48, 0.64}, 0.22, 0.22, -0.72 * pi, 0.70 * pi, 16)};
        case 6:
            return {{{0.64, 0.12}, {0.46, 0.32}, {0.35, 0.52}, {0.30, 0.64}},
                    arc({0.50, 0.64}, 0.21, 0.21, 0.0, 2.0 * pi, 22)};
        case 7:
            return {{{0.28, 0.15}, {0.74, 0.15}}, {{0.74, 0.15}, {0.42, 0.86}}};
        case 8:
            return {arc({0.50, 0.31}, 0.18, 0.17, 0.0, 2.0 * pi, 22),
                    arc({0.50, 0.68}, 0.22, 0.20, 0.0, 2.0 * pi, 22)};
        default:
            return {arc({0.48, 0.34}, 0.19, 0.19, 0.0, 2.0 * pi, 22),
                    {{0.67, 0.40}, {0.66, 0.60}, {0.58, 0.86}}};
    }
}

double dist_to_segment(double px, double py, const P& a, const P& b) {
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0.0 ? ((px - a.x) * vx + (py - a.y) * vy) / len2 : 0.0;
    t = std::min(1.0, std::max(0.0, t));
    const double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

SourceDigits synthetic_digits(std::uint64_t seed, int count, Split split) {
    if (count < 1) throw std::invalid_argument("synthetic_digits: count must be >= 1");
    SourceDigits src;
    src.images.resize(static_cast<std::size_t>(count));
    src.labels.resize(static_cast<std::size_t>(count));
    src.indices.resize(static_cast<std::size_t>(count));
    const std::int64_t offset = split == Split::Train ? 0 : (std::int64_t{1} << 32);

#pragma omp parallel for schedule(static)
    for (int i = 0; i < count; ++i) {
        const std::int64_t global = offset + i;
        const int digit = i % kNumClasses;  // exactly uniform class counts
        auto rng = nn::make_rng(nn::mix_seed(seed, static_cast<std::uint64_t>(global), 0xD161));
        auto uniform = [&rng](double lo, double hi) {
            return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
        };

        const double angle = uniform(-0.13, 0.13);
        const double scale_x = uniform(0.86, 1.06);
        const double scale_y = uniform(0.86, 1.06);
        const double shear = uniform(-0.09, 0.09);
        const double tx = uniform(-0.05, 0.05);
        const double ty = uniform(-0.05, 0.05);
        const double half_width = uniform(0.75, 1.25);  // pixels
        const double peak = uniform(190.0, 255.0);

        const double ca = std::cos(angle), sa = std::sin(angle);
        auto jitter = [&](P p) {
            const double ux = (p.x - 0.5) * scale_x;
            const double uy = (p.y - 0.5) * scale_y;
            const double rx = ca * ux - sa * uy + shear * uy;
            const double ry = sa * ux + ca * uy;
            return P{0.5 + rx + tx, 0.5 + ry + ty};
        };

        std::vector<std::pair<P, P>> segs;
        for (auto& stroke : digit_skeleton(digit)) {
            for (std::size_t k = 0; k + 1 < stroke.size(); ++k)
                segs.emplace_back(jitter(stroke[k]), jitter(stroke[k + 1]));
        }

        auto& img = src.images[static_cast<std::size_t>(i)];
        constexpr double aa = 0.6;  // anti-alias band, pixels
        for (int y = 0; y < kImageSide; ++y)
            for (int x = 0; x < kImageSide; ++x) {
                const double px = (x + 0.5) / kImageSide;
                const double py = (y + 0.5) / kImageSide;
                double dmin = 1e9;
                for (const auto& [a, b] : segs)
                    dmin = std::min(dmin, dist_to_segment(px, py, a, b));
                const double dpix = dmin * kImageSide;
                double cov = (half_width + aa - dpix) / (2.0 * aa);
                cov = std::min(1.0, std::max(0.0, cov));
                img[static_cast<std::size_t>(y * kImageSide + x)] =
                    static_cast<std::uint8_t>(std::lround(peak * cov));
            }
        src.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(digit);
        src.indices[static_cast<std::size_t>(i)] = global;
    }
    return src;
}

}  // namespace rebias::data
