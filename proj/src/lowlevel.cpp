#include "lcnn/lowlevel.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <numeric>

#include "lcnn/error.hpp"

namespace lcnn {

double Histogram::total() const {
    return std::accumulate(bins.begin(), bins.end(), 0.0);
}

double chi_square(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error("chi_square: histograms have different bin counts");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = a[i] + b[i];
        if (denom <= 0.0) continue;
        const double d = a[i] - b[i];
        s += 2.0 * d * d / denom;
    }
    return s;
}

std::vector<double> abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error("abs_diff: vectors have different lengths");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::abs(a[i] - b[i]);
    return out;
}

namespace {

int color_bin(ColorSpace cs, int channel, double v) {
    return std::min(kColorBinsPerChannel - 1, static_cast<int>(unit_range(cs, channel, v) * kColorBinsPerChannel));
}

// Running moments about the first sample, so constant data yields exactly
// zero variance and the mean equals the sample.
struct Moments {
    double shift = 0.0;
    double s1 = 0.0;
    double s2 = 0.0;
    long n = 0;

    void add(double x) {
        if (n == 0) shift = x;
        const double d = x - shift;
        s1 += d;
        s2 += d * d;
        ++n;
    }
    double mean() const { return n ? shift + s1 / n : 0.0; }
    double variance() const { return n ? std::max(0.0, (s2 - s1 * s1 / n) / n) : 0.0; }
};

void normalise(Histogram& h, double total) {
    if (total <= 0.0) return;
    for (auto& v : h.bins) v /= total;
}

} // namespace

Histogram color_histogram(const Image& img, const RegionMask& mask) {
    if (mask.area() < 1) throw Error("color_histogram: empty region");
    if (mask.width() != img.width() || mask.height() != img.height()) throw Error("color_histogram: mask size mismatch");
    Histogram h{std::vector<double>(3 * kColorBinsPerChannel, 0.0)};
    const ColorSpace cs = img.color_space();
    mask.for_each([&](int x, int y) {
        for (int c = 0; c < 3; ++c) h.bins[c * kColorBinsPerChannel + color_bin(cs, c, img.at(c, x, y))] += 1.0;
    });
    normalise(h, 3.0 * static_cast<double>(mask.area()));
    return h;
}

// ---------------------------------------------------------------------------
// LBP

namespace {

std::array<std::uint8_t, 256> build_uniform_table() {
    std::array<std::uint8_t, 256> table{};
    int next = 0;
    for (int code = 0; code < 256; ++code) {
        int transitions = 0;
        for (int b = 0; b < 8; ++b) transitions += ((code >> b) & 1) != ((code >> ((b + 1) % 8)) & 1);
        table[code] = transitions <= 2 ? static_cast<std::uint8_t>(next++) : kLbpBins - 1;
    }
    return table;
}

std::vector<double> lightness(const Image& img) {
    if (img.color_space() == ColorSpace::Lab) return {img.plane(0).begin(), img.plane(0).end()};
    const Image lab = convert(img, ColorSpace::Lab);
    return {lab.plane(0).begin(), lab.plane(0).end()};
}

} // namespace

int lbp_uniform_bin(std::uint8_t code) {
    static const auto table = build_uniform_table();
    return table[code];
}

LbpMap lbp_map(const Image& img) {
    if (img.width() < 3 || img.height() < 3) throw Error("lbp_map: image must be at least 3x3");
    const std::vector<double> L = lightness(img);
    const int w = img.width(), h = img.height();
    LbpMap map{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h, LbpMap::kLbpBorder)};
    // Neighbours clockwise from the top-left corner.
    static constexpr int dx[8] = {-1, 0, 1, 1, 1, 0, -1, -1};
    static constexpr int dy[8] = {-1, -1, -1, 0, 1, 1, 1, 0};
    for (int y = 1; y < h - 1; ++y)
        for (int x = 1; x < w - 1; ++x) {
            const double centre = L[static_cast<std::size_t>(y) * w + x];
            unsigned code = 0;
            for (int p = 0; p < 8; ++p)
                if (L[static_cast<std::size_t>(y + dy[p]) * w + (x + dx[p])] > centre) code |= 1u << p;
            map.bins[static_cast<std::size_t>(y) * w + x] = static_cast<std::uint8_t>(lbp_uniform_bin(static_cast<std::uint8_t>(code)));
        }
    return map;
}

Histogram lbp_histogram(const LbpMap& map, const RegionMask& mask) {
    Histogram h{std::vector<double>(kLbpBins, 0.0)};
    double n = 0.0;
    mask.for_each([&](int x, int y) {
        const std::uint8_t b = map.at(x, y);
        if (b == LbpMap::kLbpBorder) return;
        h.bins[b] += 1.0;
        n += 1.0;
    });
    if (n == 0.0) throw Error("lbp_histogram: region has no pixels inside the image frame");
    normalise(h, n);
    return h;
}

// ---------------------------------------------------------------------------
// Leung-Malik filter bank

namespace {

constexpr int kHalfSupport = (kLmFilterSupport - 1) / 2;

double gauss1d(double sigma, double x, int order) {
    const double variance = sigma * sigma;
    const double denom = 2.0 * variance;
    double g = std::exp(-x * x / denom) / std::sqrt(std::numbers::pi * denom);
    if (order == 1) g = -g * (x / variance);
    if (order == 2) g = g * ((x * x - variance) / (variance * variance));
    return g;
}

void zero_mean_unit_l1(std::vector<double>& f) {
    const double mean = std::accumulate(f.begin(), f.end(), 0.0) / static_cast<double>(f.size());
    for (auto& v : f) v -= mean;
    double l1 = 0.0;
    for (double v : f) l1 += std::abs(v);
    for (auto& v : f) v /= l1;
}

std::vector<double> oriented_filter(double scale, int order, double angle) {
    std::vector<double> f(static_cast<std::size_t>(kLmFilterSupport) * kLmFilterSupport);
    const double c = std::cos(angle), s = std::sin(angle);
    for (int r = 0; r < kLmFilterSupport; ++r)
        for (int col = 0; col < kLmFilterSupport; ++col) {
            const double x = col - kHalfSupport;
            const double y = kHalfSupport - r;
            const double rx = c * x - s * y;
            const double ry = s * x + c * y;
            f[static_cast<std::size_t>(r) * kLmFilterSupport + col] = gauss1d(3.0 * scale, rx, 0) * gauss1d(scale, ry, order);
        }
    zero_mean_unit_l1(f);
    return f;
}

std::vector<double> log_filter(double sigma) {
    std::vector<double> g(static_cast<std::size_t>(kLmFilterSupport) * kLmFilterSupport);
    double sum = 0.0;
    for (int r = 0; r < kLmFilterSupport; ++r)
        for (int col = 0; col < kLmFilterSupport; ++col) {
            const double x = col - kHalfSupport, y = r - kHalfSupport;
            const double v = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
            g[static_cast<std::size_t>(r) * kLmFilterSupport + col] = v;
            sum += v;
        }
    const double s4 = std::pow(sigma, 4);
    for (int r = 0; r < kLmFilterSupport; ++r)
        for (int col = 0; col < kLmFilterSupport; ++col) {
            const double x = col - kHalfSupport, y = r - kHalfSupport;
            auto& v = g[static_cast<std::size_t>(r) * kLmFilterSupport + col];
            v = v / sum * (x * x + y * y - 2.0 * sigma * sigma) / s4;
        }
    zero_mean_unit_l1(g);
    return g;
}

std::vector<double> gaussian_filter(double sigma) {
    std::vector<double> g(static_cast<std::size_t>(kLmFilterSupport) * kLmFilterSupport);
    for (int r = 0; r < kLmFilterSupport; ++r)
        for (int col = 0; col < kLmFilterSupport; ++col) {
            const double x = col - kHalfSupport, y = r - kHalfSupport;
            g[static_cast<std::size_t>(r) * kLmFilterSupport + col] = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
        }
    const double sum = std::accumulate(g.begin(), g.end(), 0.0);
    for (auto& v : g) v /= sum;
    return g;
}

std::vector<LmFilter> build_lm_bank() {
    std::vector<LmFilter> bank;
    const double sq2 = std::numbers::sqrt2;
    const double oriented_scales[3] = {sq2, 2.0, 2.0 * sq2};
    for (LmFilter::Kind kind : {LmFilter::Kind::Edge, LmFilter::Kind::Bar})
        for (int s = 0; s < 3; ++s)
            for (int o = 0; o < 6; ++o)
                bank.push_back({kind, s, o,
                                oriented_filter(oriented_scales[s], kind == LmFilter::Kind::Edge ? 1 : 2,
                                                std::numbers::pi * o / 6.0)});
    const double blob_scales[4] = {sq2, 2.0, 2.0 * sq2, 4.0};
    int li = 0;
    for (double s : blob_scales) {
        bank.push_back({LmFilter::Kind::LoG, li++, 0, log_filter(s)});
        bank.push_back({LmFilter::Kind::LoG, li++, 0, log_filter(3.0 * s)});
    }
    for (int i = 0; i < 4; ++i) bank.push_back({LmFilter::Kind::Gaussian, i, 0, gaussian_filter(blob_scales[i])});
    return bank;
}

// Reflect-101 index, valid for any offset.
int reflect(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

struct FftwFree {
    void operator()(void* p) const { fftw_free(p); }
};
using RealBuffer = std::unique_ptr<double[], FftwFree>;
using ComplexBuffer = std::unique_ptr<fftw_complex[], FftwFree>;

// Spectra of the filters used by lm_responses for one padded frame size.
struct BankSpectra {
    int rows = 0;
    int cols = 0;
    std::vector<std::vector<std::complex<double>>> spectra;
};

void forward_fft(int rows, int cols, double* in, fftw_complex* out) {
    fftw_plan plan;
    {
        std::lock_guard lock(fftw_planner_mutex());
        plan = fftw_plan_dft_r2c_2d(rows, cols, in, out, FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
}

void inverse_fft(int rows, int cols, fftw_complex* in, double* out) {
    fftw_plan plan;
    {
        std::lock_guard lock(fftw_planner_mutex());
        plan = fftw_plan_dft_c2r_2d(rows, cols, in, out, FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
}

// Filters that feed the 15 collapsed maps: 36 oriented, 8 LoG, smallest Gaussian.
std::vector<const LmFilter*> used_filters() {
    std::vector<const LmFilter*> out;
    for (const LmFilter& f : lm_filter_bank())
        if (f.kind != LmFilter::Kind::Gaussian || f.scale_index == 0) out.push_back(&f);
    return out;
}

std::shared_ptr<const BankSpectra> bank_spectra(int rows, int cols) {
    static std::mutex cache_mutex;
    static std::map<std::pair<int, int>, std::shared_ptr<const BankSpectra>> cache;
    {
        std::lock_guard lock(cache_mutex);
        auto it = cache.find({rows, cols});
        if (it != cache.end()) return it->second;
    }
    auto spectra = std::make_shared<BankSpectra>();
    spectra->rows = rows;
    spectra->cols = cols;
    const int ccols = cols / 2 + 1;
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    const std::size_t nc = static_cast<std::size_t>(rows) * ccols;
    RealBuffer in(static_cast<double*>(fftw_malloc(sizeof(double) * n)));
    ComplexBuffer out(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * nc)));
    for (const LmFilter* f : used_filters()) {
        std::fill(in.get(), in.get() + n, 0.0);
        // Kernel centre at the origin (circular layout).
        for (int r = 0; r < kLmFilterSupport; ++r)
            for (int c = 0; c < kLmFilterSupport; ++c) {
                const int rr = ((r - kHalfSupport) % rows + rows) % rows;
                const int cc = ((c - kHalfSupport) % cols + cols) % cols;
                in[static_cast<std::size_t>(rr) * cols + cc] += f->taps[static_cast<std::size_t>(r) * kLmFilterSupport + c];
            }
        forward_fft(rows, cols, in.get(), out.get());
        std::vector<std::complex<double>> spec(nc);
        for (std::size_t i = 0; i < nc; ++i) spec[i] = {out[i][0], out[i][1]};
        spectra->spectra.push_back(std::move(spec));
    }
    std::lock_guard lock(cache_mutex);
    return cache.emplace(std::pair{rows, cols}, std::move(spectra)).first->second;
}

} // namespace

const std::vector<LmFilter>& lm_filter_bank() {
    static const std::vector<LmFilter> bank = build_lm_bank();
    return bank;
}

LmResponses lm_responses(const Image& img) {
    if (img.empty()) throw Error("lm_responses: empty image");
    const std::vector<double> L = lightness(img);
    const int w = img.width(), h = img.height();
    const int rows = h + 2 * kHalfSupport, cols = w + 2 * kHalfSupport;
    const int ccols = cols / 2 + 1;
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    const std::size_t nc = static_cast<std::size_t>(rows) * ccols;

    RealBuffer padded(static_cast<double*>(fftw_malloc(sizeof(double) * n)));
    ComplexBuffer image_spec(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * nc)));
    ComplexBuffer product(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * nc)));
    RealBuffer result(static_cast<double*>(fftw_malloc(sizeof(double) * n)));
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            padded[static_cast<std::size_t>(r) * cols + c] =
                L[static_cast<std::size_t>(reflect(r - kHalfSupport, h)) * w + reflect(c - kHalfSupport, w)];
    forward_fft(rows, cols, padded.get(), image_spec.get());

    const auto spectra = bank_spectra(rows, cols);
    const auto filters = used_filters();
    const double inv_n = 1.0 / static_cast<double>(n);

    LmResponses out;
    out.width = w;
    out.height = h;
    for (auto& m : out.maps) m.assign(static_cast<std::size_t>(w) * h, 0.0);

    for (std::size_t fi = 0; fi < filters.size(); ++fi) {
        const auto& spec = spectra->spectra[fi];
        for (std::size_t i = 0; i < nc; ++i) {
            const std::complex<double> v = std::complex<double>(image_spec[i][0], image_spec[i][1]) * spec[i];
            product[i][0] = v.real();
            product[i][1] = v.imag();
        }
        inverse_fft(rows, cols, product.get(), result.get());
        const LmFilter& f = *filters[fi];
        int target = 0;
        switch (f.kind) {
        case LmFilter::Kind::Edge: target = f.scale_index; break;
        case LmFilter::Kind::Bar: target = 3 + f.scale_index; break;
        case LmFilter::Kind::LoG: target = 6 + f.scale_index; break;
        case LmFilter::Kind::Gaussian: target = 14; break;
        }
        auto& map = out.maps[target];
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double v = std::abs(result[static_cast<std::size_t>(y + kHalfSupport) * cols + (x + kHalfSupport)] * inv_n);
                double& m = map[static_cast<std::size_t>(y) * w + x];
                m = std::max(m, v);
            }
    }
    // Round-off from the transform leaves ~1e-14 residue where the exact
    // response is zero; snap it so flat areas compare equal.
    for (auto& m : out.maps)
        for (auto& v : m)
            if (v < 1e-9) v = 0.0;
    return out;
}

std::vector<std::uint8_t> lm_argmax(const LmResponses& r) {
    const std::size_t n = static_cast<std::size_t>(r.width) * r.height;
    std::vector<std::uint8_t> out(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        int best = 0;
        for (int m = 1; m < kLmMaps; ++m)
            if (r.maps[m][i] > r.maps[best][i]) best = m;
        out[i] = static_cast<std::uint8_t>(best);
    }
    return out;
}

Histogram lm_argmax_histogram(const LmResponses& r, const RegionMask& mask) {
    if (mask.area() < 1) throw Error("lm_argmax_histogram: empty region");
    const auto best = lm_argmax(r);
    Histogram h{std::vector<double>(kLmMaps, 0.0)};
    mask.for_each([&](int x, int y) { h.bins[best[static_cast<std::size_t>(y) * r.width + x]] += 1.0; });
    normalise(h, static_cast<double>(mask.area()));
    return h;
}

// ---------------------------------------------------------------------------
// Region statistics and the descriptor vector

RegionStats region_stats(const ImageContext& ctx, const RegionMask& mask) {
    if (mask.area() < 1) throw Error("region_stats: empty region");
    if (mask.width() != ctx.width || mask.height() != ctx.height) throw Error("region_stats: mask size mismatch");
    RegionStats st;
    for (auto& h : st.color) h.bins.assign(3 * kColorBinsPerChannel, 0.0);
    st.lbp.bins.assign(kLbpBins, 0.0);
    st.lm_hist.bins.assign(kLmMaps, 0.0);
    std::array<std::array<Moments, 3>, 3> colour{};
    Moments lbp_index;
    std::array<Moments, kLmMaps> lm{};

    mask.for_each([&](int x, int y) {
        const std::size_t idx = static_cast<std::size_t>(y) * ctx.width + x;
        for (int s = 0; s < 3; ++s) {
            const Image& img = ctx.images[s];
            for (int c = 0; c < 3; ++c) {
                const double v = img.at(c, x, y);
                st.color[s].bins[c * kColorBinsPerChannel + color_bin(img.color_space(), c, v)] += 1.0;
                colour[s][c].add(v);
            }
        }
        const std::uint8_t code = ctx.lbp.bins[idx];
        if (code != LbpMap::kLbpBorder) {
            st.lbp.bins[code] += 1.0;
            lbp_index.add(code);
        }
        st.lm_hist.bins[ctx.lm_best[idx]] += 1.0;
        for (int m = 0; m < kLmMaps; ++m) lm[m].add(ctx.lm.maps[m][idx]);
    });

    st.pixels = mask.area();
    st.lbp_pixels = lbp_index.n;
    for (int s = 0; s < 3; ++s) {
        normalise(st.color[s], 3.0 * static_cast<double>(st.pixels));
        for (int c = 0; c < 3; ++c) {
            st.mean[s][c] = colour[s][c].mean();
            st.variance[s][c] = colour[s][c].variance();
        }
    }
    normalise(st.lbp, static_cast<double>(st.lbp_pixels));
    st.lbp_variance = lbp_index.variance() / (kLbpBins * kLbpBins);
    normalise(st.lm_hist, static_cast<double>(st.pixels));
    for (int m = 0; m < kLmMaps; ++m) {
        st.lm_mean_abs[m] = lm[m].mean();
        st.lm_variance[m] = lm[m].variance();
    }
    return st;
}

ImageContext prepare_image(const Image& rgb, int strip) {
    if (rgb.color_space() != ColorSpace::RGB) throw Error("prepare_image expects an RGB image");
    ImageContext ctx;
    ctx.width = rgb.width();
    ctx.height = rgb.height();
    ctx.images = {rgb, convert(rgb, ColorSpace::Lab), convert(rgb, ColorSpace::HSV)};
    ctx.lbp = lbp_map(ctx.images[1]);
    ctx.lm = lm_responses(ctx.images[1]);
    ctx.lm_best = lm_argmax(ctx.lm);
    ctx.strips = boundary_strips(ctx.width, ctx.height, strip);
    ctx.strip_union = ctx.strips[0].united(ctx.strips[1]).united(ctx.strips[2]).united(ctx.strips[3]);
    for (int i = 0; i < 4; ++i) {
        ctx.strip_stats[i] = region_stats(ctx, ctx.strips[i]);
        if (ctx.strip_stats[i].lbp_pixels == 0) throw Error("prepare_image: boundary strip has no interior pixels");
    }
    ctx.union_stats = region_stats(ctx, ctx.strip_union);
    const RegionMask all = RegionMask::filled(ctx.width, ctx.height, Box{0, 0, ctx.width, ctx.height});
    for (int s = 0; s < 3; ++s) ctx.image_hist[s] = color_histogram(ctx.images[s], all);
    return ctx;
}

bool has_interior_pixel(const RegionMask& mask) {
    bool found = false;
    mask.for_each([&](int x, int y) {
        if (x > 0 && y > 0 && x < mask.width() - 1 && y < mask.height() - 1) found = true;
    });
    return found;
}

LowLevelVec extract_lowlevel(const ImageContext& ctx, const Proposal& p) {
    if (p.mask.area() < 1) throw Error("extract_lowlevel: empty proposal mask");
    const RegionStats r = region_stats(ctx, p.mask);
    if (r.lbp_pixels == 0) throw Error("extract_lowlevel: proposal lies entirely on the image frame");

    LowLevelVec v{};
    using namespace layout;
    for (int s = 0; s < 3; ++s) {
        for (int b = 0; b < 4; ++b) {
            const RegionStats& strip = ctx.strip_stats[b];
            v[kStripColorChi + 4 * s + b] = chi_square(r.color[s], strip.color[s]);
            for (int c = 0; c < 3; ++c) v[kStripMeanDiff + 12 * s + 3 * b + c] = std::abs(r.mean[s][c] - strip.mean[s][c]);
        }
        v[kImageColorChi + s] = chi_square(r.color[s], ctx.image_hist[s]);
    }
    for (int b = 0; b < 4; ++b) {
        v[kLbpChi + b] = chi_square(r.lbp, ctx.strip_stats[b].lbp);
        v[kLmHistChi + b] = chi_square(r.lm_hist, ctx.strip_stats[b].lm_hist);
    }
    for (int m = 0; m < kLmMaps; ++m) v[kLmResponseDiff + m] = std::abs(r.lm_mean_abs[m] - ctx.union_stats.lm_mean_abs[m]);

    double cx = 0.0, cy = 0.0;
    p.mask.for_each([&](int x, int y) {
        cx += x + 0.5;
        cy += y + 0.5;
    });
    const double n = static_cast<double>(p.mask.area());
    v[kCentroid] = cx / n / ctx.width;
    v[kCentroid + 1] = cy / n / ctx.height;
    v[kAspect] = std::min(kAspectCap, static_cast<double>(p.box.width()) / p.box.height());
    v[kBoxWidth] = static_cast<double>(p.box.width()) / ctx.width;
    v[kBoxHeight] = static_cast<double>(p.box.height()) / ctx.height;
    v[kLbpVariance] = r.lbp_variance;
    for (int m = 0; m < kLmMaps; ++m) v[kLmVariance + m] = r.lm_variance[m];
    for (int s = 0; s < 3; ++s)
        for (int c = 0; c < 3; ++c) v[kColorVariance + 3 * s + c] = r.variance[s][c];
    return v;
}

} // namespace lcnn
