#include "lcnn/imaging.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>

#include "lcnn/binary_io.hpp"
#include "lcnn/error.hpp"

namespace lcnn {

std::string_view to_string(ColorSpace cs) {
    switch (cs) {
    case ColorSpace::RGB: return "rgb";
    case ColorSpace::Lab: return "lab";
    case ColorSpace::HSV: return "hsv";
    }
    return "?";
}

ColorSpace color_space_from_string(std::string_view name) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    if (lower == "rgb") return ColorSpace::RGB;
    if (lower == "lab") return ColorSpace::Lab;
    if (lower == "hsv") return ColorSpace::HSV;
    throw Error("unknown colour space '" + std::string(name) + "'");
}

double unit_range(ColorSpace cs, int channel, double value) {
    double u = value;
    if (cs == ColorSpace::Lab) u = channel == 0 ? value / 100.0 : (value + 128.0) / 255.0;
    return std::clamp(u, 0.0, 1.0);
}

Box box_union(const Box& a, const Box& b) {
    return {std::min(a.x0, b.x0), std::min(a.y0, b.y0), std::max(a.x1, b.x1), std::max(a.y1, b.y1)};
}

Image::Image(int width, int height, ColorSpace cs, double fill)
    : width_(width), height_(height), cs_(cs),
      data_(static_cast<std::size_t>(width) * height * kChannels, fill) {
    if (width < 0 || height < 0) throw Error("negative image dimensions");
}

// ---------------------------------------------------------------------------
// RegionMask

RegionMask RegionMask::filled(int width, int height, const Box& box) {
    if (!box.within(width, height)) throw Error("mask box outside image");
    RegionMask m;
    m.width_ = width;
    m.height_ = height;
    m.bounds_ = box;
    m.bits_.assign(static_cast<std::size_t>(box.area()), 1);
    m.area_ = box.area();
    return m;
}

RegionMask RegionMask::from_dense(int width, int height, std::span<const std::uint8_t> dense) {
    if (dense.size() != static_cast<std::size_t>(width) * height) throw Error("dense mask size mismatch");
    return from_bits(width, height, Box{0, 0, width, height}, std::vector<std::uint8_t>(dense.begin(), dense.end()));
}

RegionMask RegionMask::from_bits(int width, int height, const Box& bounds, std::vector<std::uint8_t> bits) {
    if (bits.size() != static_cast<std::size_t>(bounds.area())) throw Error("mask bits do not match bounds");
    int x0 = bounds.x1, y0 = bounds.y1, x1 = bounds.x0, y1 = bounds.y0;
    long area = 0;
    const int bw = bounds.width();
    for (int y = bounds.y0; y < bounds.y1; ++y)
        for (int x = bounds.x0; x < bounds.x1; ++x)
            if (bits[static_cast<std::size_t>(y - bounds.y0) * bw + (x - bounds.x0)]) {
                ++area;
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x + 1);
                y1 = std::max(y1, y + 1);
            }
    RegionMask m;
    m.width_ = width;
    m.height_ = height;
    m.area_ = area;
    if (area == 0) return m;
    m.bounds_ = Box{x0, y0, x1, y1};
    m.bits_.resize(static_cast<std::size_t>(m.bounds_.area()));
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            m.bits_[static_cast<std::size_t>(y - y0) * m.bounds_.width() + (x - x0)] =
                bits[static_cast<std::size_t>(y - bounds.y0) * bw + (x - bounds.x0)] ? 1 : 0;
    return m;
}

std::vector<std::uint8_t> RegionMask::dense() const {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(width_) * height_, 0);
    for_each([&](int x, int y) { out[static_cast<std::size_t>(y) * width_ + x] = 1; });
    return out;
}

RegionMask RegionMask::united(const RegionMask& other) const {
    if (other.width_ != width_ || other.height_ != height_) throw Error("mask dimension mismatch");
    if (area_ == 0) return other;
    if (other.area_ == 0) return *this;
    const Box b = box_union(bounds_, other.bounds_);
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(b.area()), 0);
    auto mark = [&](int x, int y) { bits[static_cast<std::size_t>(y - b.y0) * b.width() + (x - b.x0)] = 1; };
    for_each(mark);
    other.for_each(mark);
    return from_bits(width_, height_, b, std::move(bits));
}

// ---------------------------------------------------------------------------
// File I/O

namespace {

bool has_png_signature(const std::vector<std::uint8_t>& bytes) {
    static constexpr std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    return bytes.size() >= 8 && std::memcmp(bytes.data(), sig, 8) == 0;
}

struct DecodedPng {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;
};

DecodedPng decode_png(const std::vector<std::uint8_t>& bytes, const std::string& path, bool want_color) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
        throw IoError(path + ": cannot decode PNG (" + image.message + ")");
    if (want_color) {
        const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
        const bool alpha = (image.format & PNG_FORMAT_FLAG_ALPHA) != 0;
        if (!color || alpha) {
            png_image_free(&image);
            throw IoError(path + ": expected 3-channel RGB PNG, got " +
                          std::to_string(PNG_IMAGE_SAMPLE_CHANNELS(image.format)) + " channel(s)");
        }
        image.format = PNG_FORMAT_RGB;
    } else {
        image.format = PNG_FORMAT_GRAY;
    }
    DecodedPng out;
    out.width = static_cast<int>(image.width);
    out.height = static_cast<int>(image.height);
    out.pixels.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw IoError(path + ": cannot decode PNG (" + msg + ")");
    }
    return out;
}

// Parses one whitespace-delimited PPM header token, skipping comments.
bool ppm_token(const std::vector<std::uint8_t>& bytes, std::size_t& pos, long& value) {
    for (;;) {
        while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
        if (pos < bytes.size() && bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            continue;
        }
        break;
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) return false;
    value = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
        value = value * 10 + (bytes[pos] - '0');
        if (value > 1'000'000) return false;
        ++pos;
    }
    return true;
}

Image decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& path) {
    if (bytes.size() < 2 || bytes[0] != 'P') throw IoError(path + ": not a PNG or PPM file");
    if (bytes[1] != '6') throw IoError(path + ": only binary RGB PPM (P6) is supported");
    std::size_t pos = 2;
    long w = 0, h = 0, maxval = 0;
    if (!ppm_token(bytes, pos, w) || !ppm_token(bytes, pos, h) || !ppm_token(bytes, pos, maxval))
        throw IoError(path + ": malformed PPM header");
    if (w <= 0 || h <= 0 || maxval != 255) throw IoError(path + ": unsupported PPM geometry or depth");
    ++pos;  // single whitespace after maxval
    const std::size_t need = static_cast<std::size_t>(w) * h * 3;
    if (bytes.size() < pos + need) throw IoError(path + ": truncated PPM data");
    Image img(static_cast<int>(w), static_cast<int>(h));
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, x, y) = bytes[pos + (static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
    return img;
}

void write_png(const std::filesystem::path& path, int width, int height, png_uint_32 format, const void* buffer) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width);
    image.height = static_cast<png_uint_32>(height);
    image.format = format;
    png_alloc_size_t size = 0;
    if (!png_image_write_get_memory_size(image, size, 0, buffer, 0, nullptr))
        throw IoError(path.string() + ": PNG encode failed (" + image.message + ")");
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, buffer, 0, nullptr))
        throw IoError(path.string() + ": PNG encode failed (" + image.message + ")");
    out.resize(size);
    write_file_atomic(path, out);
}

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

} // namespace

Image load_image(const std::filesystem::path& path) {
    const std::string name = path.string();
    if (!std::filesystem::exists(path)) throw IoError(name + ": file not found");
    const auto bytes = read_file(path);
    if (!has_png_signature(bytes)) return decode_ppm(bytes, name);
    const DecodedPng png = decode_png(bytes, name, true);
    Image img(png.width, png.height);
    for (int y = 0; y < png.height; ++y)
        for (int x = 0; x < png.width; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, x, y) = png.pixels[(static_cast<std::size_t>(y) * png.width + x) * 3 + c] / 255.0;
    return img;
}

RegionMask load_gt_mask(const std::filesystem::path& path) {
    const std::string name = path.string();
    if (!std::filesystem::exists(path)) throw IoError(name + ": file not found");
    const auto bytes = read_file(path);
    if (!has_png_signature(bytes)) throw IoError(name + ": ground-truth masks must be PNG");
    const DecodedPng png = decode_png(bytes, name, false);
    std::vector<std::uint8_t> dense(png.pixels.size());
    std::transform(png.pixels.begin(), png.pixels.end(), dense.begin(), [](std::uint8_t v) { return v > 127 ? 1 : 0; });
    return RegionMask::from_dense(png.width, png.height, dense);
}

Gray8 load_png_gray8(const std::filesystem::path& path) {
    const std::string name = path.string();
    if (!std::filesystem::exists(path)) throw IoError(name + ": file not found");
    const auto bytes = read_file(path);
    if (!has_png_signature(bytes)) throw IoError(name + ": not a PNG file");
    DecodedPng png = decode_png(bytes, name, false);
    return {png.width, png.height, std::move(png.pixels)};
}

void save_png_rgb(const std::filesystem::path& path, const Image& rgb) {
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(rgb.pixels()) * 3);
    for (int y = 0; y < rgb.height(); ++y)
        for (int x = 0; x < rgb.width(); ++x)
            for (int c = 0; c < 3; ++c)
                buf[(static_cast<std::size_t>(y) * rgb.width() + x) * 3 + c] = to_byte(rgb.at(c, x, y));
    write_png(path, rgb.width(), rgb.height(), PNG_FORMAT_RGB, buf.data());
}

void save_png_gray8(const std::filesystem::path& path, int width, int height, std::span<const std::uint8_t> values) {
    if (values.size() != static_cast<std::size_t>(width) * height) throw Error("gray8 buffer size mismatch");
    write_png(path, width, height, PNG_FORMAT_GRAY, values.data());
}

void save_png_gray16(const std::filesystem::path& path, int width, int height, std::span<const std::uint16_t> values) {
    if (values.size() != static_cast<std::size_t>(width) * height) throw Error("gray16 buffer size mismatch");
    write_png(path, width, height, PNG_FORMAT_LINEAR_Y, values.data());
}

void save_ppm(const std::filesystem::path& path, const Image& rgb) {
    std::string out = "P6\n" + std::to_string(rgb.width()) + " " + std::to_string(rgb.height()) + "\n255\n";
    for (int y = 0; y < rgb.height(); ++y)
        for (int x = 0; x < rgb.width(); ++x)
            for (int c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(rgb.at(c, x, y))));
    write_file_atomic(path, out);
}

// ---------------------------------------------------------------------------
// Colour conversion

namespace {

double srgb_to_linear(double v) {
    return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}

double lab_f(double t) {
    constexpr double eps = 216.0 / 24389.0;
    constexpr double kappa = 24389.0 / 27.0;
    return t > eps ? std::cbrt(t) : (kappa * t + 16.0) / 116.0;
}

void rgb_to_lab(double r, double g, double b, double out[3]) {
    r = srgb_to_linear(r);
    g = srgb_to_linear(g);
    b = srgb_to_linear(b);
    // D65 reference white.
    const double x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    const double y = (0.2126729 * r + 0.7151522 * g + 0.0721750 * b) / 1.00000;
    const double z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    const double fx = lab_f(x), fy = lab_f(y), fz = lab_f(z);
    out[0] = std::clamp(116.0 * fy - 16.0, 0.0, 100.0);
    out[1] = std::clamp(500.0 * (fx - fy), -128.0, 127.0);
    out[2] = std::clamp(200.0 * (fy - fz), -128.0, 127.0);
}

void rgb_to_hsv(double r, double g, double b, double out[3]) {
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double delta = mx - mn;
    double h = 0.0;
    if (delta > 0.0) {
        if (mx == r) h = (g - b) / delta;
        else if (mx == g) h = 2.0 + (b - r) / delta;
        else h = 4.0 + (r - g) / delta;
        h /= 6.0;
        if (h < 0.0) h += 1.0;
        if (h >= 1.0) h -= 1.0;
    }
    out[0] = h;
    out[1] = mx > 0.0 ? delta / mx : 0.0;
    out[2] = mx;
}

} // namespace

Image convert(const Image& img, ColorSpace target) {
    if (img.color_space() != ColorSpace::RGB) throw Error("colour conversion requires an RGB source image");
    if (target == ColorSpace::RGB) return img;
    Image out(img.width(), img.height(), target);
    const auto r = img.plane(0), g = img.plane(1), b = img.plane(2);
    auto o0 = out.plane(0), o1 = out.plane(1), o2 = out.plane(2);
    double v[3];
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (target == ColorSpace::Lab) rgb_to_lab(r[i], g[i], b[i], v);
        else rgb_to_hsv(r[i], g[i], b[i], v);
        o0[i] = v[0];
        o1[i] = v[1];
        o2[i] = v[2];
    }
    return out;
}

Image warp_bilinear(const Image& img, const Box& box, int side) {
    if (box.empty()) throw Error("warp_bilinear: degenerate box");
    if (!box.within(img.width(), img.height())) throw Error("warp_bilinear: box outside image");
    if (side < 1) throw Error("warp_bilinear: side must be positive");
    Image out(side, side, img.color_space());
    const double sx = static_cast<double>(box.width()) / side;
    const double sy = static_cast<double>(box.height()) / side;

    struct Tap {
        int i0, i1;
        double f;
    };
    auto taps = [side](int lo, int hi, double scale) {
        std::vector<Tap> t(static_cast<std::size_t>(side));
        for (int i = 0; i < side; ++i) {
            double p = lo + (i + 0.5) * scale - 0.5;
            p = std::clamp(p, static_cast<double>(lo), static_cast<double>(hi - 1));
            const int i0 = static_cast<int>(std::floor(p));
            t[i] = {i0, std::min(i0 + 1, hi - 1), p - i0};
        }
        return t;
    };
    const auto tx = taps(box.x0, box.x1, sx);
    const auto ty = taps(box.y0, box.y1, sy);
    for (int c = 0; c < Image::kChannels; ++c)
        for (int j = 0; j < side; ++j) {
            const Tap& vy = ty[j];
            for (int i = 0; i < side; ++i) {
                const Tap& vx = tx[i];
                const double top = img.at(c, vx.i0, vy.i0) * (1.0 - vx.f) + img.at(c, vx.i1, vy.i0) * vx.f;
                const double bot = img.at(c, vx.i0, vy.i1) * (1.0 - vx.f) + img.at(c, vx.i1, vy.i1) * vx.f;
                out.at(c, i, j) = vy.f == 0.0 ? top : top * (1.0 - vy.f) + bot * vy.f;
            }
        }
    return out;
}

std::array<RegionMask, 4> boundary_strips(int width, int height, int strip) {
    if (width < 1 || height < 1) throw Error("boundary_strips: empty image");
    strip = std::max(strip, 1);
    const int sh = std::max(1, std::min(strip, height / 2));
    const int sw = std::max(1, std::min(strip, width / 2));
    return {
        RegionMask::filled(width, height, Box{0, 0, width, sh}),
        RegionMask::filled(width, height, Box{0, height - sh, width, height}),
        RegionMask::filled(width, height, Box{0, 0, sw, height}),
        RegionMask::filled(width, height, Box{width - sw, 0, width, height}),
    };
}

} // namespace lcnn
