#include "lcnn/proposals.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <tuple>
#include <unordered_map>

#include "lcnn/binary_io.hpp"
#include "lcnn/error.hpp"

namespace lcnn {

namespace {

constexpr int kColorBins = 25;
constexpr int kTextureBins = 10;
constexpr char kProposalMagic[] = "LCNNPROP";
constexpr std::uint16_t kProposalVersion = 1;

struct GroupRegion {
    std::vector<double> color;    // 3 x 25, L1-normalised over all bins
    std::vector<double> texture;  // 3 x 10, L1-normalised over all bins
    long size = 0;
    Box box{};
    RegionMask mask;
    std::set<int> neighbours;
    bool alive = true;
};

double intersection(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::min(a[i], b[i]);
    return s;
}

std::vector<double> weighted_mix(const std::vector<double>& a, long na, const std::vector<double>& b, long nb) {
    std::vector<double> out(a.size());
    const double total = static_cast<double>(na + nb);
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] * na + b[i] * nb) / total;
    return out;
}

} // namespace

std::vector<SegConfig> default_seg_configs() {
    std::vector<SegConfig> out;
    for (ColorSpace cs : {ColorSpace::RGB, ColorSpace::Lab, ColorSpace::HSV})
        for (double k : {100.0, 200.0}) out.push_back({cs, k, 50, 0.8});
    return out;
}

std::vector<Proposal> group_regions(const Image& img, const Segmentation& seg, ProposalSource source) {
    if (img.width() != seg.width() || img.height() != seg.height())
        throw Error("group_regions: segmentation does not match image");
    const int w = img.width(), h = img.height();
    const int n = seg.region_count();
    const long image_size = static_cast<long>(w) * h;
    const ColorSpace cs = img.color_space();

    std::vector<GroupRegion> regions(static_cast<std::size_t>(n));
    for (auto& r : regions) {
        r.color.assign(3 * kColorBins, 0.0);
        r.texture.assign(3 * kTextureBins, 0.0);
    }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            GroupRegion& r = regions[seg.label(x, y)];
            for (int c = 0; c < 3; ++c) {
                const double u = unit_range(cs, c, img.at(c, x, y));
                r.color[c * kColorBins + std::min(kColorBins - 1, static_cast<int>(u * kColorBins))] += 1.0;
                const double gx = unit_range(cs, c, img.at(c, std::min(x + 1, w - 1), y)) -
                                  unit_range(cs, c, img.at(c, std::max(x - 1, 0), y));
                const double gy = unit_range(cs, c, img.at(c, x, std::min(y + 1, h - 1))) -
                                  unit_range(cs, c, img.at(c, x, std::max(y - 1, 0)));
                double angle = std::atan2(gy, gx);
                if (angle < 0.0) angle += 2.0 * std::numbers::pi;
                const int bin = std::min(kTextureBins - 1, static_cast<int>(angle / (2.0 * std::numbers::pi) * kTextureBins));
                r.texture[c * kTextureBins + bin] += 1.0;
            }
            if (x + 1 < w && seg.label(x + 1, y) != seg.label(x, y)) {
                r.neighbours.insert(seg.label(x + 1, y));
                regions[seg.label(x + 1, y)].neighbours.insert(seg.label(x, y));
            }
            if (y + 1 < h && seg.label(x, y + 1) != seg.label(x, y)) {
                r.neighbours.insert(seg.label(x, y + 1));
                regions[seg.label(x, y + 1)].neighbours.insert(seg.label(x, y));
            }
        }
    for (int i = 0; i < n; ++i) {
        GroupRegion& r = regions[i];
        r.size = seg.regions()[i].area;
        r.box = seg.regions()[i].box;
        r.mask = seg.mask(i);
        for (auto& v : r.color) v /= 3.0 * r.size;
        for (auto& v : r.texture) v /= 3.0 * r.size;
    }

    auto similarity = [&](int a, int b) {
        const GroupRegion& ra = regions[a];
        const GroupRegion& rb = regions[b];
        const double s_color = intersection(ra.color, rb.color);
        const double s_texture = intersection(ra.texture, rb.texture);
        const double s_size = 1.0 - static_cast<double>(ra.size + rb.size) / image_size;
        const double s_fill = 1.0 - static_cast<double>(box_union(ra.box, rb.box).area() - ra.size - rb.size) / image_size;
        return s_color + s_texture + s_size + s_fill;
    };

    // Ordered by descending similarity, ties broken by ascending (a, b).
    using Key = std::tuple<double, int, int>;
    std::set<Key> queue;
    std::map<std::pair<int, int>, double> pair_sim;
    auto add_pair = [&](int a, int b) {
        if (a > b) std::swap(a, b);
        if (pair_sim.count({a, b})) return;
        const double s = similarity(a, b);
        pair_sim[{a, b}] = s;
        queue.insert({-s, a, b});
    };
    for (int a = 0; a < n; ++a)
        for (int b : regions[a].neighbours)
            if (a < b) add_pair(a, b);

    auto drop_pairs_of = [&](int r) {
        for (int nb : regions[r].neighbours) {
            const int a = std::min(r, nb), b = std::max(r, nb);
            auto it = pair_sim.find({a, b});
            if (it == pair_sim.end()) continue;
            queue.erase({-it->second, a, b});
            pair_sim.erase(it);
        }
    };

    while (!queue.empty()) {
        const auto [neg_s, a, b] = *queue.begin();
        GroupRegion merged;
        merged.size = regions[a].size + regions[b].size;
        merged.box = box_union(regions[a].box, regions[b].box);
        merged.color = weighted_mix(regions[a].color, regions[a].size, regions[b].color, regions[b].size);
        merged.texture = weighted_mix(regions[a].texture, regions[a].size, regions[b].texture, regions[b].size);
        merged.mask = regions[a].mask.united(regions[b].mask);
        drop_pairs_of(a);
        drop_pairs_of(b);
        const int id = static_cast<int>(regions.size());
        for (int src : {a, b})
            for (int nb : regions[src].neighbours) {
                if (nb == a || nb == b) continue;
                regions[nb].neighbours.erase(src);
                regions[nb].neighbours.insert(id);
                merged.neighbours.insert(nb);
            }
        regions[a].alive = regions[b].alive = false;
        regions.push_back(std::move(merged));
        for (int nb : regions[id].neighbours) add_pair(nb, id);
    }

    std::vector<Proposal> out;
    out.reserve(regions.size());
    for (auto& r : regions) out.push_back(Proposal{r.mask.bounds(), std::move(r.mask), source, Label::Unlabeled});
    return out;
}

namespace {

std::uint64_t proposal_key(const Proposal& p) {
    std::uint64_t h = fnv1a(std::span(p.mask.bits()));
    const int coords[4] = {p.box.x0, p.box.y0, p.box.x1, p.box.y1};
    return fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(coords), sizeof coords), h);
}

} // namespace

ProposalSet selective_search(const Image& rgb, std::span<const SegConfig> configs, std::size_t cap) {
    if (rgb.color_space() != ColorSpace::RGB) throw Error("selective_search expects an RGB image");
    if (configs.empty()) throw Error("selective_search: at least one segmentation config is required");
    std::vector<std::vector<Proposal>> per_config;
    for (const SegConfig& sc : configs) {
        const Image img = convert(rgb, sc.cs);
        const Segmentation seg = segment_graph(img, sc.k, sc.min_size, sc.sigma);
        auto props = group_regions(img, seg, ProposalSource{sc.cs, static_cast<float>(sc.k)});
        std::reverse(props.begin(), props.end());
        per_config.push_back(std::move(props));
    }

    ProposalSet out;
    out.width = rgb.width();
    out.height = rgb.height();
    out.cap = cap;
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> seen;
    std::size_t longest = 0;
    for (const auto& v : per_config) longest = std::max(longest, v.size());
    for (std::size_t rank = 0; rank < longest && out.proposals.size() < cap; ++rank)
        for (auto& list : per_config) {
            if (rank >= list.size() || out.proposals.size() >= cap) continue;
            Proposal& p = list[rank];
            auto& bucket = seen[proposal_key(p)];
            const bool dup = std::any_of(bucket.begin(), bucket.end(), [&](std::size_t i) {
                return out.proposals[i].box == p.box && out.proposals[i].mask == p.mask;
            });
            if (dup) continue;
            bucket.push_back(out.proposals.size());
            out.proposals.push_back(std::move(p));
        }
    return out;
}

ProposalSet sliding_window_proposals(int width, int height, std::size_t cap) {
    ProposalSet out;
    out.width = width;
    out.height = height;
    out.cap = cap;
    for (double frac : {0.7, 0.5, 0.3}) {
        const int bw = std::max(1, static_cast<int>(std::lround(frac * width)));
        const int bh = std::max(1, static_cast<int>(std::lround(frac * height)));
        const int sx = std::max(1, bw / 4), sy = std::max(1, bh / 4);
        for (int y = 0; y + bh <= height; y += sy)
            for (int x = 0; x + bw <= width; x += sx) {
                if (out.proposals.size() >= cap) return out;
                const Box b{x, y, x + bw, y + bh};
                out.proposals.push_back(Proposal{b, RegionMask::filled(width, height, b), {}, Label::Unlabeled});
            }
    }
    return out;
}

ProposalSet filter_proposals(const ProposalSet& ps, long min_box_area, double min_fill) {
    if (min_fill < 0.0 || min_fill > 1.0) throw Error("filter_proposals: min_fill must lie in [0,1]");
    ProposalSet out;
    out.image_id = ps.image_id;
    out.width = ps.width;
    out.height = ps.height;
    out.cap = ps.cap;
    for (const Proposal& p : ps.proposals) {
        const long area = p.box.area();
        if (area < min_box_area) continue;
        if (area == 0 || static_cast<double>(p.mask.area()) < min_fill * static_cast<double>(area)) continue;
        out.proposals.push_back(p);
    }
    return out;
}

Label label_proposal(long intersection, long box_area, long gt_area) {
    if (box_area < 1 || gt_area < 1) throw Error("label_proposal: box and ground-truth areas must be positive");
    if (intersection < 0 || intersection > std::min(box_area, gt_area))
        throw Error("label_proposal: intersection exceeds min(|B|, |G|)");
    const long largest = std::max(box_area, gt_area);
    // Integer form of the 0.7 / 0.3 thresholds, exact for every input.
    if (10 * intersection >= 7 * largest) return Label::Positive;
    if (10 * intersection <= 3 * largest) return Label::Negative;
    return Label::Unused;
}

void assign_labels(ProposalSet& ps, const RegionMask& gt) {
    if (gt.width() != ps.width || gt.height() != ps.height) throw Error("assign_labels: ground truth size mismatch");
    const int w = ps.width, h = ps.height;
    std::vector<long> integral(static_cast<std::size_t>(w + 1) * (h + 1), 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            integral[(y + 1) * (w + 1) + x + 1] = (gt.contains(x, y) ? 1 : 0) + integral[y * (w + 1) + x + 1] +
                                                  integral[(y + 1) * (w + 1) + x] - integral[y * (w + 1) + x];
    const long gt_area = gt.area();
    for (Proposal& p : ps.proposals) {
        if (gt_area == 0) {
            p.label = Label::Negative;
            continue;
        }
        const Box& b = p.box;
        const long inter = integral[b.y1 * (w + 1) + b.x1] - integral[b.y0 * (w + 1) + b.x1] -
                           integral[b.y1 * (w + 1) + b.x0] + integral[b.y0 * (w + 1) + b.x0];
        p.label = label_proposal(inter, b.area(), gt_area);
    }
}

Box pad_box(const Box& box, int context, int width, int height) {
    return {std::max(0, box.x0 - context), std::max(0, box.y0 - context), std::min(width, box.x1 + context),
            std::min(height, box.y1 + context)};
}

int context_for_side(int side) {
    return static_cast<int>(std::lround(16.0 * side / 227.0));
}

Patch make_patch(const Image& rgb, const Proposal& p, int context, int side) {
    const Box padded = pad_box(p.box, context, rgb.width(), rgb.height());
    Patch out;
    out.pixels = warp_bilinear(rgb, padded, side);
    out.mask.resize(static_cast<std::size_t>(side) * side);
    for (int j = 0; j < side; ++j) {
        const int sy = std::min(padded.y1 - 1, padded.y0 + static_cast<int>((j + 0.5) * padded.height() / side));
        for (int i = 0; i < side; ++i) {
            const int sx = std::min(padded.x1 - 1, padded.x0 + static_cast<int>((i + 0.5) * padded.width() / side));
            out.mask[static_cast<std::size_t>(j) * side + i] = p.mask.contains(sx, sy) ? 1 : 0;
        }
    }
    return out;
}

Image mirror_patch(const Image& patch) {
    Image out(patch.width(), patch.height(), patch.color_space());
    for (int c = 0; c < Image::kChannels; ++c)
        for (int y = 0; y < patch.height(); ++y)
            for (int x = 0; x < patch.width(); ++x) out.at(c, x, y) = patch.at(c, patch.width() - 1 - x, y);
    return out;
}

Image rescale_patch(const Image& patch, double scale) {
    if (scale <= 0.0) throw Error("rescale_patch: scale must be positive");
    const int w = patch.width(), h = patch.height();
    Image out(w, h, patch.color_space());
    const double cx = w / 2.0, cy = h / 2.0;
    for (int y = 0; y < h; ++y) {
        const double sy = std::clamp((y + 0.5 - cy) / scale + cy - 0.5, 0.0, h - 1.0);
        const int y0 = static_cast<int>(std::floor(sy));
        const int y1 = std::min(y0 + 1, h - 1);
        const double fy = sy - y0;
        for (int x = 0; x < w; ++x) {
            const double sx = std::clamp((x + 0.5 - cx) / scale + cx - 0.5, 0.0, w - 1.0);
            const int x0 = static_cast<int>(std::floor(sx));
            const int x1 = std::min(x0 + 1, w - 1);
            const double fx = sx - x0;
            for (int c = 0; c < Image::kChannels; ++c) {
                const double top = patch.at(c, x0, y0) * (1.0 - fx) + patch.at(c, x1, y0) * fx;
                const double bot = patch.at(c, x0, y1) * (1.0 - fx) + patch.at(c, x1, y1) * fx;
                out.at(c, x, y) = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    return out;
}

Image augment_variant(const Image& patch, int variant) {
    switch (variant) {
    case 0: return patch;
    case 1: return mirror_patch(patch);
    case 2: return rescale_patch(patch, 0.95);
    case 3: return rescale_patch(patch, 1.05);
    default: throw Error("augment_variant: index out of range");
    }
}

std::vector<Image> augment(const Image& patch) {
    std::vector<Image> out;
    out.reserve(kAugmentVariants);
    for (int v = 0; v < kAugmentVariants; ++v) out.push_back(augment_variant(patch, v));
    return out;
}

// ---------------------------------------------------------------------------
// Cache file

void write_proposals(const std::filesystem::path& path, const ProposalSet& ps) {
    BinaryWriter w;
    w.magic(kProposalMagic);
    w.u16(kProposalVersion);
    w.u32(static_cast<std::uint32_t>(ps.proposals.size()));
    w.u32(static_cast<std::uint32_t>(ps.width));
    w.u32(static_cast<std::uint32_t>(ps.height));
    w.u32(static_cast<std::uint32_t>(ps.cap));
    w.str(ps.image_id);
    for (const Proposal& p : ps.proposals) {
        w.u32(static_cast<std::uint32_t>(p.box.x0));
        w.u32(static_cast<std::uint32_t>(p.box.y0));
        w.u32(static_cast<std::uint32_t>(p.box.x1));
        w.u32(static_cast<std::uint32_t>(p.box.y1));
        // Run lengths over the box in raster order, starting with a 0-run.
        std::vector<std::uint32_t> runs;
        std::uint8_t current = 0;
        std::uint32_t len = 0;
        for (int y = p.box.y0; y < p.box.y1; ++y)
            for (int x = p.box.x0; x < p.box.x1; ++x) {
                const std::uint8_t v = p.mask.contains(x, y) ? 1 : 0;
                if (v != current) {
                    runs.push_back(len);
                    current = v;
                    len = 0;
                }
                ++len;
            }
        runs.push_back(len);
        w.u32(static_cast<std::uint32_t>(runs.size()));
        for (auto r : runs) w.u32(r);
        w.u8(static_cast<std::uint8_t>(p.source.cs));
        w.f32(p.source.k);
        w.u8(static_cast<std::uint8_t>(p.label));
    }
    write_file_atomic(path, w.bytes());
}

ProposalSet read_proposals(const std::filesystem::path& path) {
    BinaryReader r(read_file(path), path.string());
    r.expect_magic(kProposalMagic);
    const auto version = r.u16();
    if (version != kProposalVersion)
        throw FormatError(path.string() + ": unsupported proposal cache version " + std::to_string(version));
    ProposalSet ps;
    const std::uint32_t count = r.u32();
    ps.width = static_cast<int>(r.u32());
    ps.height = static_cast<int>(r.u32());
    ps.cap = r.u32();
    ps.image_id = r.str();
    ps.proposals.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Proposal p;
        p.box.x0 = static_cast<int>(r.u32());
        p.box.y0 = static_cast<int>(r.u32());
        p.box.x1 = static_cast<int>(r.u32());
        p.box.y1 = static_cast<int>(r.u32());
        if (!p.box.within(ps.width, ps.height)) throw FormatError(path.string() + ": proposal box outside image");
        const std::uint32_t nruns = r.u32();
        std::vector<std::uint8_t> bits;
        bits.reserve(static_cast<std::size_t>(p.box.area()));
        std::uint8_t value = 0;
        for (std::uint32_t k = 0; k < nruns; ++k) {
            const std::uint32_t len = r.u32();
            if (bits.size() + len > static_cast<std::size_t>(p.box.area()))
                throw FormatError(path.string() + ": mask runs overflow box");
            bits.insert(bits.end(), len, value);
            value ^= 1;
        }
        if (bits.size() != static_cast<std::size_t>(p.box.area())) throw FormatError(path.string() + ": mask runs short");
        p.mask = RegionMask::from_bits(ps.width, ps.height, p.box, std::move(bits));
        if (p.mask.area() == 0 || !(p.mask.bounds() == p.box))
            throw FormatError(path.string() + ": mask does not match its box");
        p.source.cs = static_cast<ColorSpace>(r.u8());
        p.source.k = r.f32();
        p.label = static_cast<Label>(r.u8());
        ps.proposals.push_back(std::move(p));
    }
    return ps;
}

} // namespace lcnn
