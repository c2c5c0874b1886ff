#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lcnn/imaging.hpp"
#include "lcnn/segmentation.hpp"

namespace lcnn {

enum class Label : std::uint8_t { Unlabeled = 0, Positive = 1, Negative = 2, Unused = 3 };

/// Where a proposal came from: the colour space and scale of its segmentation.
struct ProposalSource {
    ColorSpace cs = ColorSpace::RGB;
    float k = 0.0f;

    friend bool operator==(const ProposalSource&, const ProposalSource&) = default;
};

/// Candidate region: the mask plus its tight bounding box.
struct Proposal {
    Box box{};
    RegionMask mask;
    ProposalSource source{};
    Label label = Label::Unlabeled;
};

struct ProposalSet {
    std::string image_id;
    int width = 0;
    int height = 0;
    std::size_t cap = 2000;
    std::vector<Proposal> proposals;
};

struct SegConfig {
    ColorSpace cs = ColorSpace::RGB;
    double k = 100.0;
    int min_size = 50;
    double sigma = 0.8;
};

/// Default diversification: RGB, Lab and HSV at k = 100 and k = 200.
std::vector<SegConfig> default_seg_configs();

/// Hierarchical grouping over one segmentation. `img` must be expressed in
/// the colour space the similarity histograms should use. Returns the R
/// leaf regions followed by the R-1 merged regions, in creation order.
std::vector<Proposal> group_regions(const Image& img, const Segmentation& seg, ProposalSource source);

/// Selective search: one segmentation + grouping per config, pooled in
/// round-robin order (most recent merge first within each config),
/// deduplicated on (box, mask) and truncated to `cap`.
ProposalSet selective_search(const Image& rgb, std::span<const SegConfig> configs, std::size_t cap = 2000);

/// Dense sliding-window boxes with full-box masks (the no-selective-search ablation).
ProposalSet sliding_window_proposals(int width, int height, std::size_t cap = 2000);

/// Keeps proposals with box.area >= min_box_area and mask/box fill >= min_fill.
ProposalSet filter_proposals(const ProposalSet& ps, long min_box_area, double min_fill);

/// Overlap rule: Positive iff |B∩G| >= 0.7 max(|B|,|G|), Negative iff
/// |B∩G| <= 0.3 max(|B|,|G|), otherwise Unused.
Label label_proposal(long intersection, long box_area, long gt_area);

/// Labels every proposal by intersecting its box with the ground-truth mask.
void assign_labels(ProposalSet& ps, const RegionMask& gt);

/// Grows `box` by `context` pixels per side, clipped to the image.
Box pad_box(const Box& box, int context, int width, int height);

/// Context padding used at a given warp side (16 px at 227, scaled).
int context_for_side(int side);

struct Patch {
    Image pixels;                     ///< side x side RGB
    std::vector<std::uint8_t> mask;   ///< side x side region membership, row-major
};

/// Pads the proposal box, warps pixels bilinearly and the region mask with
/// nearest neighbour to side x side.
Patch make_patch(const Image& rgb, const Proposal& p, int context, int side);

/// Horizontal mirror of a square patch.
Image mirror_patch(const Image& patch);
/// Rescales about the patch centre by `scale`; edges are clamped so the
/// output keeps the same side.
Image rescale_patch(const Image& patch, double scale);

/// Training augmentation: original, mirror, 0.95x and 1.05x rescales.
std::vector<Image> augment(const Image& patch);
inline constexpr int kAugmentVariants = 4;
/// One augmentation variant by index (0 = original), matching augment().
Image augment_variant(const Image& patch, int variant);

void write_proposals(const std::filesystem::path& path, const ProposalSet& ps);
ProposalSet read_proposals(const std::filesystem::path& path);

} // namespace lcnn
