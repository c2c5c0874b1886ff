#include "lcnn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <string>

#include "lcnn/binary_io.hpp"
#include "lcnn/error.hpp"

namespace lcnn {

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    std::array<double, 3> rgb{};
    switch (static_cast<int>(hp) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
    }
    const double m = v - c;
    for (auto& ch : rgb) ch += m;
    return rgb;
}

struct Shape {
    bool ellipse;
    double cx, cy, rx, ry;

    bool contains(double x, double y) const {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        return ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
    }
};

} // namespace

SynthSample synth_sample(const SynthParams& p, std::uint64_t index) {
    if (p.width < 16 || p.height < 16) throw Error("synthetic images must be at least 16x16");
    std::mt19937_64 rng(fnv1a(std::to_string(index), p.seed * 0x9E3779B97F4A7C15ull + 1));
    std::uniform_real_distribution<double> U(0.0, 1.0);
    const int w = p.width, h = p.height;

    const double bg_hue = U(rng);
    const auto bg = hsv_to_rgb(bg_hue, 0.2 + 0.35 * U(rng), 0.3 + 0.35 * U(rng));
    struct Wave {
        double fx, fy, phase, amp;
    };
    Wave waves[2];
    for (auto& wv : waves) {
        const double angle = std::numbers::pi * U(rng);
        const double freq = 0.2 + 0.5 * U(rng);
        wv = {freq * std::cos(angle), freq * std::sin(angle), 2.0 * std::numbers::pi * U(rng), 0.05 + 0.08 * U(rng)};
    }
    std::normal_distribution<double> noise(0.0, 0.03);

    SynthSample out{Image(w, h, ColorSpace::RGB), RegionMask{}};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double t = 0.0;
            for (const auto& wv : waves) t += wv.amp * std::sin(wv.fx * x + wv.fy * y + wv.phase);
            for (int c = 0; c < 3; ++c) out.rgb.at(c, x, y) = std::clamp(bg[c] + t + noise(rng), 0.0, 1.0);
        }

    // Foreground layout, redrawn until the covered fraction is in range.
    std::vector<std::uint8_t> dense(static_cast<std::size_t>(w) * h);
    std::vector<Shape> shapes;
    for (int attempt = 0;; ++attempt) {
        if (attempt > 1000) throw Error("synthetic generator failed to place objects");
        shapes.clear();
        const int count = U(rng) < 0.7 ? 1 : 2;
        for (int i = 0; i < count; ++i) {
            const double scale = count == 1 ? 1.0 : 0.7;
            const double rx = (0.12 + 0.2 * U(rng)) * w * scale;
            const double ry = (0.12 + 0.2 * U(rng)) * h * scale;
            const double margin = 3.0;
            const double cx = margin + rx + U(rng) * std::max(0.0, w - 2 * (rx + margin));
            const double cy = margin + ry + U(rng) * std::max(0.0, h - 2 * (ry + margin));
            shapes.push_back({U(rng) < 0.5, cx, cy, rx, ry});
        }
        long covered = 0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                bool in = false;
                for (const auto& s : shapes) in = in || s.contains(x + 0.5, y + 0.5);
                dense[static_cast<std::size_t>(y) * w + x] = in;
                covered += in;
            }
        const double fraction = static_cast<double>(covered) / (static_cast<double>(w) * h);
        if (fraction >= p.min_fraction && fraction <= p.max_fraction) break;
    }

    for (std::size_t i = 0; i < shapes.size(); ++i) {
        const double hue = bg_hue + 0.3 + 0.4 * U(rng);
        const auto fg = hsv_to_rgb(hue, 0.6 + 0.4 * U(rng), 0.7 + 0.3 * U(rng));
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (shapes[i].contains(x + 0.5, y + 0.5))
                    for (int c = 0; c < 3; ++c) out.rgb.at(c, x, y) = fg[c];
    }
    out.gt = RegionMask::from_dense(w, h, dense);
    return out;
}

void write_synthetic_dataset(const SynthParams& p, const std::filesystem::path& dir) {
    if (p.train < 0 || p.test < 0 || p.train + p.test < 1) throw Error("synthetic dataset needs at least one image");
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "gt");
    std::string manifest = "split,image,gt\n";
    for (int i = 0; i < p.train + p.test; ++i) {
        const bool train = i < p.train;
        char name[32];
        std::snprintf(name, sizeof name, "%s_%04d", train ? "train" : "test", train ? i : i - p.train);
        const SynthSample s = synth_sample(p, static_cast<std::uint64_t>(i));
        const std::string img = std::string("images/") + name + ".png";
        const std::string gt = std::string("gt/") + name + ".png";
        save_png_rgb(dir / img, s.rgb);
        const auto mask = s.gt.dense();
        std::vector<std::uint8_t> bytes(mask.size());
        std::transform(mask.begin(), mask.end(), bytes.begin(), [](std::uint8_t v) { return v ? 255 : 0; });
        save_png_gray8(dir / gt, p.width, p.height, bytes);
        manifest += std::string(train ? "train" : "test") + "," + img + "," + gt + "\n";
    }
    write_file_atomic(dir / "manifest.csv", manifest);
}

} // namespace lcnn
