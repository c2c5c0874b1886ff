#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "lcnn/imaging.hpp"
#include "lcnn/proposals.hpp"

namespace lcnn {

inline constexpr int kLowLevelDims = 104;
inline constexpr int kContrastDims = 74;  // c1..c74, stored first
inline constexpr int kSpatialDims = 30;   // p1..p30, stored after the contrast block
inline constexpr int kColorBinsPerChannel = 16;
inline constexpr int kLbpBins = 59;
inline constexpr int kLmMaps = 15;
inline constexpr int kLmFilterSupport = 49;

/// Offsets of each descriptor group inside a LowLevelVec (0-based).
namespace layout {
inline constexpr int kStripColorChi = 0;     // c1-c12: 3 spaces x 4 strips
inline constexpr int kImageColorChi = 12;    // c13-c15
inline constexpr int kStripMeanDiff = 15;    // c16-c51: 3 spaces x 4 strips x 3 channels
inline constexpr int kLbpChi = 51;           // c52-c55
inline constexpr int kLmHistChi = 55;        // c56-c59
inline constexpr int kLmResponseDiff = 59;   // c60-c74
inline constexpr int kCentroid = 74;         // p1-p2
inline constexpr int kAspect = 76;           // p3
inline constexpr int kBoxWidth = 77;         // p4
inline constexpr int kBoxHeight = 78;        // p5
inline constexpr int kLbpVariance = 79;      // p6
inline constexpr int kLmVariance = 80;       // p7-p21
inline constexpr int kColorVariance = 95;    // p22-p30: RGB, Lab, HSV
} // namespace layout

inline constexpr double kAspectCap = 10.0;

using LowLevelVec = std::array<double, kLowLevelDims>;

struct Histogram {
    std::vector<double> bins;

    double total() const;
};

/// Sum over bins of 2 (a-b)^2 / (a+b); empty bins contribute 0.
double chi_square(std::span<const double> a, std::span<const double> b);
inline double chi_square(const Histogram& a, const Histogram& b) { return chi_square(a.bins, b.bins); }

/// Elementwise |a - b|.
std::vector<double> abs_diff(std::span<const double> a, std::span<const double> b);

/// 16-bin marginal histogram per channel, concatenated (48 bins) and
/// L1-normalised over the region. `img` must already be in the colour
/// space whose histogram is wanted.
Histogram color_histogram(const Image& img, const RegionMask& mask);

/// Uniform (8,1) LBP codes mapped to 59 bins; the one-pixel frame is marked
/// kLbpBorder and ignored by histograms.
struct LbpMap {
    static constexpr std::uint8_t kLbpBorder = 0xff;

    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> bins;

    std::uint8_t at(int x, int y) const { return bins[static_cast<std::size_t>(y) * width + x]; }
};

/// Raw 8-bit code to its uniform-pattern bin: 58 uniform codes in ascending
/// order, then one shared bin (58) for everything else.
int lbp_uniform_bin(std::uint8_t code);

/// LBP on the Lab lightness channel (RGB inputs are converted). A neighbour
/// sets its bit when strictly brighter than the centre.
LbpMap lbp_map(const Image& img);
Histogram lbp_histogram(const LbpMap& map, const RegionMask& mask);

/// One of the 48 Leung-Malik filters, kLmFilterSupport squared, row-major.
struct LmFilter {
    enum class Kind { Edge, Bar, LoG, Gaussian } kind;
    int scale_index;
    int orientation;
    std::vector<double> taps;
};

/// Full bank: 18 edge and 18 bar filters (3 scales x 6 orientations), 8 LoG
/// and 4 Gaussians. Derivative and LoG filters are zero-mean with unit L1
/// norm; Gaussians sum to one.
const std::vector<LmFilter>& lm_filter_bank();

/// Collapsed absolute LM responses on the Lab lightness channel:
/// maps 0-2 edge max over orientations per scale, 3-5 bar max per scale,
/// 6-13 |LoG|, 14 |Gaussian| at the smallest scale.
struct LmResponses {
    int width = 0;
    int height = 0;
    std::array<std::vector<double>, kLmMaps> maps;

    double at(int m, int x, int y) const { return maps[m][static_cast<std::size_t>(y) * width + x]; }
};

LmResponses lm_responses(const Image& img);

/// Per-pixel index of the strongest collapsed response (ties to the lowest).
std::vector<std::uint8_t> lm_argmax(const LmResponses& r);
Histogram lm_argmax_histogram(const LmResponses& r, const RegionMask& mask);

/// Order-free statistics of a region, shared by regions and strips.
struct RegionStats {
    std::array<Histogram, 3> color;                        // RGB, Lab, HSV
    std::array<std::array<double, 3>, 3> mean{};           // [space][channel]
    std::array<std::array<double, 3>, 3> variance{};       // [space][channel]
    Histogram lbp;
    double lbp_variance = 0.0;
    Histogram lm_hist;
    std::array<double, kLmMaps> lm_mean_abs{};
    std::array<double, kLmMaps> lm_variance{};
    long pixels = 0;
    long lbp_pixels = 0;
};

/// Per-image products shared by every proposal of that image.
struct ImageContext {
    int width = 0;
    int height = 0;
    std::array<Image, 3> images;  // RGB, Lab, HSV
    LbpMap lbp;
    LmResponses lm;
    std::vector<std::uint8_t> lm_best;
    std::array<RegionMask, 4> strips;
    RegionMask strip_union;
    std::array<RegionStats, 4> strip_stats;
    RegionStats union_stats;
    std::array<Histogram, 3> image_hist;
};

ImageContext prepare_image(const Image& rgb, int strip = 20);

RegionStats region_stats(const ImageContext& ctx, const RegionMask& mask);

/// True when the mask has at least one pixel off the image frame, which the
/// LBP statistics require.
bool has_interior_pixel(const RegionMask& mask);

/// All 104 contrast and spatial/property descriptors of one proposal.
LowLevelVec extract_lowlevel(const ImageContext& ctx, const Proposal& p);

} // namespace lcnn
