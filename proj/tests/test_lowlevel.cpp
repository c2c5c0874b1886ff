#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>
#include <set>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "lcnn/error.hpp"
#include "lcnn/lowlevel.hpp"
#include "lcnn/segmentation.hpp"

using namespace lcnn;

namespace {

Image textured(int w, int h, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    Image img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const bool in = x > w / 3 && x < 2 * w / 3 && y > h / 4 && y < 3 * h / 4;
            for (int c = 0; c < 3; ++c)
                img.at(c, x, y) = std::clamp((in ? 0.7 - 0.2 * c : 0.2 + 0.1 * c) + 0.1 * U(rng), 0.0, 1.0);
        }
    return img;
}

Proposal box_proposal(int w, int h, const Box& b) {
    Proposal p;
    p.box = b;
    p.mask = RegionMask::filled(w, h, b);
    return p;
}

double sum(const Histogram& h) { return std::accumulate(h.bins.begin(), h.bins.end(), 0.0); }

} // namespace

TEST(LowLevel, ChiSquareExamples) {
    const std::vector<double> a = {0.25, 0.5, 0.25};
    EXPECT_EQ(chi_square(a, a), 0.0);
    EXPECT_DOUBLE_EQ(chi_square(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 4.0);
    EXPECT_EQ(chi_square(std::vector<double>{0.5, 0.5, 0}, std::vector<double>{0.5, 0.5, 0}), 0.0);
    EXPECT_THROW(chi_square(std::vector<double>{1}, std::vector<double>{0.5, 0.5}), Error);
}

TEST(LowLevel, ChiSquareIsSymmetricAndBounded) {
    std::mt19937 rng(1);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> a(10), b(10);
        for (int i = 0; i < 10; ++i) {
            a[i] = U(rng) < 0.3 ? 0.0 : U(rng);
            b[i] = U(rng) < 0.3 ? 0.0 : U(rng);
        }
        const double sa = std::accumulate(a.begin(), a.end(), 0.0) + 1e-300;
        const double sb = std::accumulate(b.begin(), b.end(), 0.0) + 1e-300;
        for (auto& v : a) v /= sa;
        for (auto& v : b) v /= sb;
        const double d = chi_square(a, b);
        EXPECT_GE(d, 0.0);
        EXPECT_LE(d, 4.0 + 1e-12);
        EXPECT_DOUBLE_EQ(d, chi_square(b, a));
    }
}

TEST(LowLevel, AbsDiffExamples) {
    const std::vector<double> a = {1, 2, 3}, b = {3, 2, 1};
    EXPECT_EQ(abs_diff(a, b), (std::vector<double>{2, 0, 2}));
    EXPECT_EQ(abs_diff(a, b), abs_diff(b, a));
    EXPECT_EQ(abs_diff(a, a), (std::vector<double>{0, 0, 0}));
    EXPECT_THROW(abs_diff(a, std::vector<double>{1}), Error);
}

TEST(LowLevel, ConstantRegionHistogram) {
    const Image img(10, 10, ColorSpace::RGB, 0.4);
    const Histogram h = color_histogram(img, RegionMask::filled(10, 10, {2, 2, 7, 7}));
    ASSERT_EQ(h.bins.size(), 48u);
    for (int c = 0; c < 3; ++c) {
        int nonzero = 0;
        for (int b = 0; b < 16; ++b)
            if (h.bins[c * 16 + b] != 0.0) {
                ++nonzero;
                EXPECT_NEAR(h.bins[c * 16 + b], 1.0 / 3.0, 1e-15);
            }
        EXPECT_EQ(nonzero, 1);
    }
    EXPECT_NEAR(sum(h), 1.0, 1e-9);
}

TEST(LowLevel, BlackWhiteRegionHistogram) {
    Image img(8, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 4; x < 8; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, x, y) = 1.0;
    const Histogram h = color_histogram(img, RegionMask::filled(8, 4, {0, 0, 8, 4}));
    for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(h.bins[c * 16], 1.0 / 6.0, 1e-15);
        EXPECT_NEAR(h.bins[c * 16 + 15], 1.0 / 6.0, 1e-15);
    }
    EXPECT_NEAR(sum(h), 1.0, 1e-12);
}

TEST(LowLevel, HistogramIgnoresPixelOrder) {
    std::mt19937 rng(4);
    Image img = textured(20, 20, 4);
    const RegionMask mask = RegionMask::filled(20, 20, {3, 3, 15, 12});
    const Histogram before = color_histogram(img, mask);
    std::vector<std::pair<int, int>> px;
    mask.for_each([&](int x, int y) { px.push_back({x, y}); });
    auto shuffled = px;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    Image permuted = img;
    for (std::size_t i = 0; i < px.size(); ++i)
        for (int c = 0; c < 3; ++c) permuted.at(c, px[i].first, px[i].second) = img.at(c, shuffled[i].first, shuffled[i].second);
    const Histogram after = color_histogram(permuted, mask);
    for (std::size_t b = 0; b < before.bins.size(); ++b) EXPECT_NEAR(before.bins[b], after.bins[b], 1e-15);
}

TEST(LowLevel, UniformBinTable) {
    int uniform = 0;
    std::vector<int> seen(59, 0);
    for (int code = 0; code < 256; ++code) {
        const auto c = static_cast<std::uint8_t>(code);
        const int transitions = std::popcount(static_cast<unsigned>(static_cast<std::uint8_t>(c ^ std::rotr(c, 1))));
        const int bin = lbp_uniform_bin(c);
        ASSERT_GE(bin, 0);
        ASSERT_LT(bin, 59);
        ++seen[bin];
        if (transitions <= 2) {
            EXPECT_LT(bin, 58);
            ++uniform;
        } else {
            EXPECT_EQ(bin, 58);
        }
    }
    EXPECT_EQ(uniform, 58);
    for (int b = 0; b < 58; ++b) EXPECT_EQ(seen[b], 1);
    EXPECT_EQ(lbp_uniform_bin(0), 0);
}

TEST(LowLevel, LbpOfConstantImageIsPointMass) {
    const LbpMap map = lbp_map(Image(9, 7, ColorSpace::RGB, 0.6));
    for (int y = 1; y < 6; ++y)
        for (int x = 1; x < 8; ++x) EXPECT_EQ(map.at(x, y), lbp_uniform_bin(0));
    EXPECT_EQ(map.at(0, 0), LbpMap::kLbpBorder);
    const Histogram h = lbp_histogram(map, RegionMask::filled(9, 7, {0, 0, 9, 7}));
    ASSERT_EQ(h.bins.size(), 59u);
    EXPECT_DOUBLE_EQ(h.bins[0], 1.0);
}

TEST(LowLevel, LbpOfBrightCentre) {
    Image img(3, 3, ColorSpace::RGB, 0.1);
    for (int c = 0; c < 3; ++c) img.at(c, 1, 1) = 0.9;
    EXPECT_EQ(lbp_map(img).at(1, 1), lbp_uniform_bin(0));

    // On a 5x5 frame each ring neighbour sees exactly one brighter pixel.
    Image big(5, 5, ColorSpace::RGB, 0.1);
    for (int c = 0; c < 3; ++c) big.at(c, 2, 2) = 0.9;
    const LbpMap map = lbp_map(big);
    EXPECT_EQ(map.at(2, 2), lbp_uniform_bin(0));
    std::set<int> bins;
    for (int y = 1; y <= 3; ++y)
        for (int x = 1; x <= 3; ++x) {
            if (x == 2 && y == 2) continue;
            const int b = map.at(x, y);
            EXPECT_LT(b, 58);
            bool single_bit = false;
            for (int bit = 0; bit < 8; ++bit)
                single_bit = single_bit || b == lbp_uniform_bin(static_cast<std::uint8_t>(1u << bit));
            EXPECT_TRUE(single_bit);
            bins.insert(b);
        }
    EXPECT_EQ(bins.size(), 8u);
    const Histogram h = lbp_histogram(map, RegionMask::filled(5, 5, {0, 0, 5, 5}));
    EXPECT_NEAR(sum(h), 1.0, 1e-12);
}

TEST(LowLevel, LbpRejectsTinyImagesAndFrameOnlyMasks) {
    EXPECT_THROW(lbp_map(Image(2, 5)), Error);
    const LbpMap map = lbp_map(Image(6, 6));
    EXPECT_THROW(lbp_histogram(map, RegionMask::filled(6, 6, {0, 0, 6, 1})), Error);
}

TEST(LowLevel, FilterBankComposition) {
    const auto& bank = lm_filter_bank();
    ASSERT_EQ(bank.size(), 48u);
    int kinds[4] = {};
    for (const auto& f : bank) {
        ++kinds[static_cast<int>(f.kind)];
        ASSERT_EQ(f.taps.size(), static_cast<std::size_t>(kLmFilterSupport * kLmFilterSupport));
        const double s = std::accumulate(f.taps.begin(), f.taps.end(), 0.0);
        double l1 = 0.0;
        for (double t : f.taps) l1 += std::abs(t);
        if (f.kind == LmFilter::Kind::Gaussian) {
            EXPECT_NEAR(s, 1.0, 1e-9);
        } else {
            EXPECT_NEAR(s, 0.0, 1e-9);
            EXPECT_NEAR(l1, 1.0, 1e-9);
        }
    }
    EXPECT_EQ(kinds[0], 18);
    EXPECT_EQ(kinds[1], 18);
    EXPECT_EQ(kinds[2], 8);
    EXPECT_EQ(kinds[3], 4);
}

TEST(LowLevel, LmOfConstantImage) {
    const Image img(30, 20, ColorSpace::RGB, 0.5);
    const double L = convert(img, ColorSpace::Lab).at(0, 0, 0);
    const LmResponses r = lm_responses(img);
    for (int m = 0; m < 14; ++m)
        for (double v : r.maps[m]) EXPECT_EQ(v, 0.0) << "map " << m;
    for (double v : r.maps[14]) EXPECT_NEAR(v, L, 1e-9);
    const Histogram h = lm_argmax_histogram(r, RegionMask::filled(30, 20, {0, 0, 30, 20}));
    ASSERT_EQ(h.bins.size(), 15u);
    EXPECT_DOUBLE_EQ(h.bins[14], 1.0);
}

TEST(LowLevel, LmEdgeMapPeaksOnStep) {
    const int w = 60, h = 40;
    Image img(w, h, ColorSpace::RGB, 0.2);
    for (int y = 0; y < h; ++y)
        for (int x = w / 2; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, x, y) = 0.8;
    const LmResponses r = lm_responses(img);
    for (int m = 0; m < kLmMaps; ++m)
        for (double v : r.maps[m]) EXPECT_GE(v, 0.0);
    const int y = h / 2;
    int best = 0;
    for (int x = 0; x < w; ++x)
        if (r.at(0, x, y) > r.at(0, best, y)) best = x;
    EXPECT_GE(best, w / 2 - 1);
    EXPECT_LE(best, w / 2);
    // Far from the edge the derivative response vanishes.
    EXPECT_LT(r.at(0, 2, y), 1e-3 * r.at(0, best, y) + 1e-12);
}

TEST(LowLevel, TexturesWithDifferentScalesHaveDifferentArgmaxHistograms) {
    // Thin bright lines on the left, wide bright bars on the right, all on black.
    const int w = 96, h = 48;
    Image img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const bool line = x < w / 2 ? x % 6 == 0 : x % 24 < 8;
            for (int c = 0; c < 3; ++c) img.at(c, x, y) = line ? 1.0 : 0.0;
        }
    const LmResponses r = lm_responses(img);
    const Histogram left = lm_argmax_histogram(r, RegionMask::filled(w, h, {8, 8, 40, 40}));
    const Histogram right = lm_argmax_histogram(r, RegionMask::filled(w, h, {56, 8, 88, 40}));
    EXPECT_NEAR(sum(left), 1.0, 1e-12);
    EXPECT_NEAR(sum(right), 1.0, 1e-12);
    EXPECT_GT(chi_square(left.bins, right.bins), 0.5);
}

TEST(LowLevel, UniformImageHasZeroContrast) {
    const Image img(64, 48, ColorSpace::RGB, 0.35);
    const ImageContext ctx = prepare_image(img);
    const LowLevelVec v = extract_lowlevel(ctx, box_proposal(64, 48, {20, 15, 44, 33}));
    for (int i = 0; i < kContrastDims; ++i) EXPECT_NEAR(v[i], 0.0, 1e-9) << "c" << i + 1;
}

TEST(LowLevel, FullImageGeometry) {
    const Image img = textured(60, 40, 2);
    const ImageContext ctx = prepare_image(img);
    const LowLevelVec v = extract_lowlevel(ctx, box_proposal(60, 40, {0, 0, 60, 40}));
    EXPECT_NEAR(v[layout::kCentroid], 0.5, 1e-12);
    EXPECT_NEAR(v[layout::kCentroid + 1], 0.5, 1e-12);
    EXPECT_NEAR(v[layout::kAspect], 1.5, 1e-12);
    EXPECT_NEAR(v[layout::kBoxWidth], 1.0, 1e-12);
    EXPECT_NEAR(v[layout::kBoxHeight], 1.0, 1e-12);
}

TEST(LowLevel, AspectRatioIsCapped) {
    const Image img = textured(200, 40, 3);
    const ImageContext ctx = prepare_image(img);
    const LowLevelVec v = extract_lowlevel(ctx, box_proposal(200, 40, {1, 10, 199, 12}));
    EXPECT_DOUBLE_EQ(v[layout::kAspect], kAspectCap);
}

TEST(LowLevel, DescriptorRangesOnRandomProposals) {
    const int w = 64, h = 48;
    const Image img = textured(w, h, 5);
    const ImageContext ctx = prepare_image(img);
    std::mt19937 rng(6);
    const std::vector<std::pair<int, int>> chi_blocks = {
        {layout::kStripColorChi, layout::kStripMeanDiff}, {layout::kLbpChi, layout::kLmResponseDiff}};
    for (int t = 0; t < 25; ++t) {
        const int x0 = 1 + static_cast<int>(rng() % (w - 3)), y0 = 1 + static_cast<int>(rng() % (h - 3));
        const int x1 = x0 + 1 + static_cast<int>(rng() % (w - x0 - 1));
        const int y1 = y0 + 1 + static_cast<int>(rng() % (h - y0 - 1));
        const LowLevelVec v = extract_lowlevel(ctx, box_proposal(w, h, {x0, y0, x1, y1}));
        for (double d : v) EXPECT_TRUE(std::isfinite(d));
        for (auto [b, e] : chi_blocks)
            for (int i = b; i < e; ++i) {
                EXPECT_GE(v[i], 0.0);
                EXPECT_LE(v[i], 4.0 + 1e-12);
            }
        for (int i = layout::kCentroid; i <= layout::kBoxHeight; ++i) {
            EXPECT_GE(v[i], 0.0);
            EXPECT_LE(v[i], kAspectCap);
        }
        for (int i = layout::kLbpVariance; i < kLowLevelDims; ++i) EXPECT_GE(v[i], 0.0);
    }
}

TEST(LowLevel, PerturbingTheRegionRaisesContrast) {
    const int w = 64, h = 48;
    Image img(w, h, ColorSpace::RGB, 0.35);
    const Proposal p = box_proposal(w, h, {20, 15, 44, 33});
    const LowLevelVec flat = extract_lowlevel(prepare_image(img), p);
    for (int c = 0; c < 3; ++c) img.at(c, 30, 20) = 0.9;
    const LowLevelVec bumped = extract_lowlevel(prepare_image(img), p);
    double before = 0.0, after = 0.0;
    for (int i = 0; i < kContrastDims; ++i) {
        before += flat[i];
        after += bumped[i];
    }
    EXPECT_EQ(before, 0.0);
    EXPECT_GT(after, 0.0);
}

TEST(LowLevel, VarianceIsZeroOnlyForConstantRegions) {
    Image img = textured(64, 48, 7);
    for (int y = 10; y < 30; ++y)
        for (int x = 10; x < 30; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, x, y) = 0.5;
    const ImageContext ctx = prepare_image(img);
    const LowLevelVec flat = extract_lowlevel(ctx, box_proposal(64, 48, {12, 12, 28, 28}));
    const LowLevelVec busy = extract_lowlevel(ctx, box_proposal(64, 48, {34, 12, 60, 40}));
    for (int i = layout::kColorVariance; i < kLowLevelDims; ++i) {
        EXPECT_NEAR(flat[i], 0.0, 1e-12);
        EXPECT_GT(busy[i], 0.0);
    }
    EXPECT_NEAR(flat[layout::kLbpVariance], 0.0, 1e-12);
}

TEST(LowLevel, ExtractionIsDeterministic) {
    const Image img = textured(50, 40, 8);
    const Proposal p = box_proposal(50, 40, {5, 6, 30, 33});
    const LowLevelVec a = extract_lowlevel(prepare_image(img), p);
    const LowLevelVec b = extract_lowlevel(prepare_image(img), p);
    EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()), 0);
}

TEST(LowLevel, RegionStatsShapes) {
    const ImageContext ctx = prepare_image(textured(40, 30, 9));
    const RegionStats s = region_stats(ctx, RegionMask::filled(40, 30, {4, 4, 20, 20}));
    EXPECT_EQ(s.lm_mean_abs.size(), 15u);
    EXPECT_EQ(s.lm_variance.size(), 15u);
    EXPECT_EQ(s.pixels, 256);
    for (const auto& h : s.color) EXPECT_NEAR(sum(h), 1.0, 1e-9);
    EXPECT_NEAR(sum(s.lbp), 1.0, 1e-9);
    EXPECT_NEAR(sum(s.lm_hist), 1.0, 1e-9);
    EXPECT_TRUE(has_interior_pixel(RegionMask::filled(40, 30, {0, 0, 2, 2})));
    EXPECT_FALSE(has_interior_pixel(RegionMask::filled(40, 30, {0, 0, 40, 1})));
}
