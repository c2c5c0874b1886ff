#include <algorithm>
#include <queue>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "lcnn/error.hpp"
#include "lcnn/segmentation.hpp"

using namespace lcnn;

namespace {

Image two_halves(int w, int h) {
    Image img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const bool left = x < w / 2;
            img.at(0, x, y) = left ? 0.9 : 0.1;
            img.at(1, x, y) = left ? 0.1 : 0.8;
            img.at(2, x, y) = 0.3;
        }
    return img;
}

Image noisy(int w, int h, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    Image img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, x, y) = 0.5 * U(rng) + (x > w / 3 ? 0.4 : 0.0) * (c == 1);
    return img;
}

void expect_valid(const Segmentation& seg) {
    const int w = seg.width(), h = seg.height();
    long total = 0;
    std::vector<long> area(seg.region_count(), 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int l = seg.label(x, y);
            ASSERT_GE(l, 0);
            ASSERT_LT(l, seg.region_count());
            ++area[l];
        }
    for (const auto& r : seg.regions()) {
        EXPECT_EQ(r.area, area[r.id]);
        total += r.area;
    }
    EXPECT_EQ(total, static_cast<long>(w) * h);

    // Every region is one 4-connected component.
    std::vector<char> seen(static_cast<std::size_t>(w) * h, 0);
    std::vector<int> components(seg.region_count(), 0);
    for (int sy = 0; sy < h; ++sy)
        for (int sx = 0; sx < w; ++sx) {
            if (seen[static_cast<std::size_t>(sy) * w + sx]) continue;
            const int l = seg.label(sx, sy);
            ++components[l];
            std::queue<std::pair<int, int>> q;
            q.push({sx, sy});
            seen[static_cast<std::size_t>(sy) * w + sx] = 1;
            while (!q.empty()) {
                auto [x, y] = q.front();
                q.pop();
                const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
                for (int d = 0; d < 4; ++d) {
                    const int nx = x + dx[d], ny = y + dy[d];
                    if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                    auto& s = seen[static_cast<std::size_t>(ny) * w + nx];
                    if (s || seg.label(nx, ny) != l) continue;
                    s = 1;
                    q.push({nx, ny});
                }
            }
        }
    for (int c : components) EXPECT_EQ(c, 1);
}

} // namespace

TEST(Segmentation, TwoSolidHalvesGiveTwoRegions) {
    const Segmentation seg = segment_graph(two_halves(20, 10), 1.0, 1, 0.0);
    ASSERT_EQ(seg.region_count(), 2);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 20; ++x) EXPECT_EQ(seg.label(x, y) == seg.label(0, 0), x < 10);
    expect_valid(seg);
}

TEST(Segmentation, ConstantImageIsOneRegion) {
    const Segmentation seg = segment_graph(Image(15, 11, ColorSpace::RGB, 0.4), 100.0, 1, 0.8);
    EXPECT_EQ(seg.region_count(), 1);
    EXPECT_EQ(seg.regions()[0].area, 165);
}

TEST(Segmentation, SmallRegionsAreMergedUntilMinSize) {
    Image img(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            const int q = (x >= 8) + 2 * (y >= 8);
            img.at(0, x, y) = q == 0 || q == 3 ? 1.0 : 0.0;
            img.at(1, x, y) = q == 1 ? 1.0 : 0.0;
            img.at(2, x, y) = q >= 2 ? 1.0 : 0.0;
        }
    EXPECT_EQ(segment_graph(img, 1.0, 1, 0.0).region_count(), 4);
    for (int min_size : {65, 100, 129, 200}) {
        const Segmentation seg = segment_graph(img, 1.0, min_size, 0.0);
        for (const auto& r : seg.regions()) EXPECT_GE(r.area, std::min<long>(min_size, 256));
        expect_valid(seg);
    }
}

TEST(Segmentation, InvariantsOnNoise) {
    for (unsigned seed = 1; seed <= 3; ++seed) {
        const Segmentation seg = segment_graph(noisy(40, 30, seed), 150.0, 20, 0.8);
        expect_valid(seg);
        for (const auto& r : seg.regions()) EXPECT_GE(r.area, 20);
    }
}

TEST(Segmentation, Deterministic) {
    const Image img = noisy(33, 27, 7);
    EXPECT_EQ(segment_graph(img, 100.0, 10, 0.8).labels(), segment_graph(img, 100.0, 10, 0.8).labels());
}

TEST(Segmentation, LargerMinSizeNeverAddsRegions) {
    const Image img = noisy(40, 30, 4);
    int prev = 1 << 30;
    for (int m : {1, 5, 10, 20, 50, 100, 400}) {
        const int n = segment_graph(img, 100.0, m, 0.8).region_count();
        EXPECT_LE(n, prev) << "min_size " << m;
        prev = n;
    }
}

TEST(Segmentation, GrayImagesIgnoreChannelOrder) {
    std::mt19937 rng(2);
    Image gray(25, 19);
    for (int y = 0; y < 19; ++y)
        for (int x = 0; x < 25; ++x) {
            const double g = (x / 6 + y / 5) % 3 * 0.3 + 0.02 * static_cast<double>(rng() % 5);
            for (int c = 0; c < 3; ++c) gray.at(c, x, y) = g;
        }
    Image swapped(25, 19);
    const int perm[3] = {2, 0, 1};
    for (int c = 0; c < 3; ++c)
        std::copy(gray.plane(perm[c]).begin(), gray.plane(perm[c]).end(), swapped.plane(c).begin());
    EXPECT_EQ(segment_graph(gray, 100.0, 5, 0.5).labels(), segment_graph(swapped, 100.0, 5, 0.5).labels());
}

TEST(Segmentation, RejectsBadArguments) {
    EXPECT_THROW(segment_graph(Image(), 100.0, 1, 0.8), Error);
    EXPECT_THROW(segment_graph(Image(4, 4), 0.0, 1, 0.8), Error);
    EXPECT_THROW(segment_graph(Image(4, 4), 1.0, 0, 0.8), Error);
    EXPECT_THROW(segment_graph(Image(4, 4), 1.0, 1, -1.0), Error);
}

TEST(Segmentation, RegionMaskMatchesLabels) {
    const Segmentation seg = segment_graph(two_halves(12, 6), 1.0, 1, 0.0);
    for (const auto& r : seg.regions()) {
        const RegionMask m = seg.mask(r.id);
        EXPECT_EQ(m.area(), r.area);
        EXPECT_EQ(m.bounds(), r.box);
    }
}
