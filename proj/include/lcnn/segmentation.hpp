#pragma once

#include <filesystem>
#include <vector>

#include "lcnn/imaging.hpp"

namespace lcnn {

struct SegRegion {
    int id = 0;
    long area = 0;
    Box box{};
};

/// Partition of an image into 4-connected regions with ids 0..R-1.
class Segmentation {
public:
    Segmentation() = default;
    Segmentation(int width, int height, std::vector<int> labels);

    int width() const { return width_; }
    int height() const { return height_; }
    int label(int x, int y) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
    const std::vector<int>& labels() const { return labels_; }
    const std::vector<SegRegion>& regions() const { return regions_; }
    int region_count() const { return static_cast<int>(regions_.size()); }

    /// Membership mask of one region.
    RegionMask mask(int id) const;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<int> labels_;
    std::vector<SegRegion> regions_;
};

/// Graph-based segmentation (Felzenszwalb-Huttenlocher) on an 8-connected
/// grid graph. Channels are first mapped onto a common 0..255 scale so that
/// `k` has the same meaning in every colour space. Components are then split
/// into 4-connected pieces, and any piece smaller than `min_size` is merged,
/// smallest first, into its 4-adjacent neighbour with the closest mean colour.
Segmentation segment_graph(const Image& img, double k, int min_size, double sigma);

/// Separable Gaussian blur with clamped borders; sigma 0 returns the input.
Image gaussian_blur(const Image& img, double sigma);

/// Debug export: region ids as a 16-bit grayscale PNG.
void save_label_png(const std::filesystem::path& path, const Segmentation& seg);

} // namespace lcnn
