#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

namespace lcnn {

enum class ColorSpace : std::uint8_t { RGB = 0, Lab = 1, HSV = 2 };

std::string_view to_string(ColorSpace cs);
ColorSpace color_space_from_string(std::string_view name);

/// Maps a channel value of `cs` onto [0, 1] (L/100, (a+128)/255, ...).
double unit_range(ColorSpace cs, int channel, double value);

/// Axis-aligned box, x0/y0 inclusive and x1/y1 exclusive.
struct Box {
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;
    int y1 = 0;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    long area() const { return static_cast<long>(width()) * height(); }
    bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
    bool empty() const { return x1 <= x0 || y1 <= y0; }
    bool within(int w, int h) const { return x0 >= 0 && y0 >= 0 && x1 <= w && y1 <= h && !empty(); }

    friend bool operator==(const Box&, const Box&) = default;
};

Box box_union(const Box& a, const Box& b);

/// Planar three-channel image. RGB and HSV values live in [0,1]; Lab keeps
/// its native ranges (L in [0,100], a/b in [-128,127]).
class Image {
public:
    static constexpr int kChannels = 3;

    Image() = default;
    Image(int width, int height, ColorSpace cs = ColorSpace::RGB, double fill = 0.0);

    int width() const { return width_; }
    int height() const { return height_; }
    int pixels() const { return width_ * height_; }
    ColorSpace color_space() const { return cs_; }
    bool empty() const { return width_ == 0 || height_ == 0; }

    double& at(int c, int x, int y) { return data_[index(c, x, y)]; }
    double at(int c, int x, int y) const { return data_[index(c, x, y)]; }

    std::span<double> plane(int c) { return {data_.data() + static_cast<std::size_t>(c) * pixels(), static_cast<std::size_t>(pixels())}; }
    std::span<const double> plane(int c) const { return {data_.data() + static_cast<std::size_t>(c) * pixels(), static_cast<std::size_t>(pixels())}; }
    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

private:
    std::size_t index(int c, int x, int y) const {
        return (static_cast<std::size_t>(c) * height_ + y) * width_ + x;
    }

    int width_ = 0;
    int height_ = 0;
    ColorSpace cs_ = ColorSpace::RGB;
    std::vector<double> data_;
};

/// Binary membership over a parent image. Bits are stored only inside
/// `bounds()`, which is the tight bounding box of the true pixels.
class RegionMask {
public:
    RegionMask() = default;

    /// Every pixel of `box` set.
    static RegionMask filled(int width, int height, const Box& box);
    /// Builds a mask from a full-frame membership vector (row-major).
    static RegionMask from_dense(int width, int height, std::span<const std::uint8_t> dense);
    /// Builds a mask from bits laid out over `bounds`; shrinks to the tight box.
    static RegionMask from_bits(int width, int height, const Box& bounds, std::vector<std::uint8_t> bits);

    int width() const { return width_; }
    int height() const { return height_; }
    long area() const { return area_; }
    const Box& bounds() const { return bounds_; }
    const std::vector<std::uint8_t>& bits() const { return bits_; }

    bool contains(int x, int y) const {
        if (!bounds_.contains(x, y)) return false;
        return bits_[static_cast<std::size_t>(y - bounds_.y0) * bounds_.width() + (x - bounds_.x0)] != 0;
    }

    /// Calls fn(x, y) for every member pixel in raster order.
    template <typename Fn>
    void for_each(Fn&& fn) const {
        const int bw = bounds_.width();
        for (int y = bounds_.y0; y < bounds_.y1; ++y) {
            const std::uint8_t* row = bits_.data() + static_cast<std::size_t>(y - bounds_.y0) * bw;
            for (int x = bounds_.x0; x < bounds_.x1; ++x)
                if (row[x - bounds_.x0]) fn(x, y);
        }
    }

    std::vector<std::uint8_t> dense() const;
    RegionMask united(const RegionMask& other) const;

    friend bool operator==(const RegionMask&, const RegionMask&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    Box bounds_{};
    std::vector<std::uint8_t> bits_;
    long area_ = 0;
};

/// Reads an 8-bit RGB PNG or binary PPM (P6) and scales values by 1/255.
Image load_image(const std::filesystem::path& path);

/// Reads a grayscale ground-truth PNG; pixels > 127 are foreground.
RegionMask load_gt_mask(const std::filesystem::path& path);

struct Gray8 {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> values;
};

/// Reads any PNG as 8-bit grayscale.
Gray8 load_png_gray8(const std::filesystem::path& path);

void save_png_rgb(const std::filesystem::path& path, const Image& rgb);
void save_png_gray8(const std::filesystem::path& path, int width, int height, std::span<const std::uint8_t> values);
void save_png_gray16(const std::filesystem::path& path, int width, int height, std::span<const std::uint16_t> values);
void save_ppm(const std::filesystem::path& path, const Image& rgb);

/// sRGB (D65) to CIE Lab, or RGB to HSV with hue in [0,1).
Image convert(const Image& img, ColorSpace target);

/// Resamples `box` into a side x side patch with bilinear interpolation
/// (square warp, aspect ratio not preserved). Sample positions are
/// pixel-centre aligned and clamped to the box.
Image warp_bilinear(const Image& img, const Box& box, int side);

enum class Strip : int { Top = 0, Bottom = 1, Left = 2, Right = 3 };

/// Border strips of width `strip`, clamped to half the image side. Corner
/// pixels belong to both strips they touch.
std::array<RegionMask, 4> boundary_strips(int width, int height, int strip = 20);

} // namespace lcnn
