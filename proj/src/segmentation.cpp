#include "lcnn/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "lcnn/error.hpp"

namespace lcnn {

Segmentation::Segmentation(int width, int height, std::vector<int> labels)
    : width_(width), height_(height), labels_(std::move(labels)) {
    if (labels_.size() != static_cast<std::size_t>(width) * height) throw Error("segmentation label size mismatch");
    int max_id = -1;
    for (int l : labels_) max_id = std::max(max_id, l);
    regions_.resize(static_cast<std::size_t>(max_id + 1));
    for (int i = 0; i <= max_id; ++i) regions_[i] = {i, 0, Box{width, height, 0, 0}};
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            SegRegion& r = regions_[labels_[static_cast<std::size_t>(y) * width + x]];
            ++r.area;
            r.box.x0 = std::min(r.box.x0, x);
            r.box.y0 = std::min(r.box.y0, y);
            r.box.x1 = std::max(r.box.x1, x + 1);
            r.box.y1 = std::max(r.box.y1, y + 1);
        }
    for (const auto& r : regions_)
        if (r.area == 0) throw Error("segmentation labels are not contiguous");
}

RegionMask Segmentation::mask(int id) const {
    const Box& b = regions_.at(id).box;
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(b.area()));
    for (int y = b.y0; y < b.y1; ++y)
        for (int x = b.x0; x < b.x1; ++x)
            bits[static_cast<std::size_t>(y - b.y0) * b.width() + (x - b.x0)] = label(x, y) == id;
    return RegionMask::from_bits(width_, height_, b, std::move(bits));
}

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    const int radius = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    for (int i = -radius; i <= radius; ++i) kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    const double sum = std::accumulate(kernel.begin(), kernel.end(), 0.0);
    for (auto& v : kernel) v /= sum;

    const int w = img.width(), h = img.height();
    Image tmp(w, h, img.color_space()), out(w, h, img.color_space());
    for (int c = 0; c < Image::kChannels; ++c) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * img.at(c, std::clamp(x + i, 0, w - 1), y);
                tmp.at(c, x, y) = acc;
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp.at(c, x, std::clamp(y + i, 0, h - 1));
                out.at(c, x, y) = acc;
            }
    }
    return out;
}

namespace {

// 8-bit style channel scale per colour space.
std::array<double, 3> channel_scale(ColorSpace cs) {
    switch (cs) {
    case ColorSpace::Lab: return {2.55, 1.0, 1.0};
    case ColorSpace::RGB:
    case ColorSpace::HSV: break;
    }
    return {255.0, 255.0, 255.0};
}

class DisjointSet {
public:
    explicit DisjointSet(int n) : parent_(n), size_(n, 1), internal_(n, 0.0) {
        std::iota(parent_.begin(), parent_.end(), 0);
    }
    int find(int x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }
    // Attaches the smaller tree under the larger; ties keep the lower root.
    int join(int a, int b, double weight) {
        if (size_[a] < size_[b] || (size_[a] == size_[b] && b < a)) std::swap(a, b);
        parent_[b] = a;
        size_[a] += size_[b];
        internal_[a] = weight;
        return a;
    }
    int size(int x) const { return size_[x]; }
    double internal(int x) const { return internal_[x]; }

private:
    std::vector<int> parent_;
    std::vector<int> size_;
    std::vector<double> internal_;
};

struct Edge {
    double w;
    int a;
    int b;
};

// Relabels so every label is one 4-connected component, ids in raster order.
std::vector<int> split_4connected(int w, int h, const std::vector<int>& comp) {
    std::vector<int> out(comp.size(), -1);
    std::vector<int> stack;
    int next = 0;
    for (int start = 0; start < w * h; ++start) {
        if (out[start] != -1) continue;
        const int src = comp[start];
        out[start] = next;
        stack.assign(1, start);
        while (!stack.empty()) {
            const int p = stack.back();
            stack.pop_back();
            const int x = p % w, y = p / w;
            const int nbr[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
            for (const auto& n : nbr) {
                if (n[0] < 0 || n[0] >= w || n[1] < 0 || n[1] >= h) continue;
                const int q = n[1] * w + n[0];
                if (out[q] == -1 && comp[q] == src) {
                    out[q] = next;
                    stack.push_back(q);
                }
            }
        }
        ++next;
    }
    return out;
}

} // namespace

Segmentation segment_graph(const Image& img, double k, int min_size, double sigma) {
    if (img.empty()) throw Error("segment_graph: empty image");
    if (k <= 0.0) throw Error("segment_graph: k must be positive");
    if (min_size < 1) throw Error("segment_graph: min_size must be at least 1");
    if (sigma < 0.0) throw Error("segment_graph: sigma must be non-negative");

    const int w = img.width(), h = img.height(), n = w * h;
    Image smooth = gaussian_blur(img, sigma);
    const auto scale = channel_scale(img.color_space());
    for (int c = 0; c < 3; ++c)
        for (double& v : smooth.plane(c)) v *= scale[c];
    const auto p0 = smooth.plane(0), p1 = smooth.plane(1), p2 = smooth.plane(2);
    auto diff = [&](int a, int b) {
        const double d0 = p0[a] - p0[b], d1 = p1[a] - p1[b], d2 = p2[a] - p2[b];
        return std::sqrt(d0 * d0 + d1 * d1 + d2 * d2);
    };

    std::vector<Edge> edges;
    edges.reserve(static_cast<std::size_t>(n) * 4);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int a = y * w + x;
            if (x + 1 < w) edges.push_back({diff(a, a + 1), a, a + 1});
            if (y + 1 < h) edges.push_back({diff(a, a + w), a, a + w});
            if (x + 1 < w && y + 1 < h) edges.push_back({diff(a, a + w + 1), a, a + w + 1});
            if (x > 0 && y + 1 < h) edges.push_back({diff(a, a + w - 1), a, a + w - 1});
        }
    std::sort(edges.begin(), edges.end(), [](const Edge& l, const Edge& r) {
        if (l.w != r.w) return l.w < r.w;
        if (l.a != r.a) return l.a < r.a;
        return l.b < r.b;
    });

    DisjointSet ds(n);
    for (const Edge& e : edges) {
        int a = ds.find(e.a), b = ds.find(e.b);
        if (a == b) continue;
        const double ta = ds.internal(a) + k / ds.size(a);
        const double tb = ds.internal(b) + k / ds.size(b);
        if (e.w <= ta && e.w <= tb) ds.join(a, b, e.w);
    }
    std::vector<int> comp(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) comp[i] = ds.find(i);
    std::vector<int> labels = split_4connected(w, h, comp);

    // Small-region merging on the 4-adjacency graph.
    const int regions = *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<long> area(regions, 0);
    std::vector<std::array<double, 3>> sum(regions, {0.0, 0.0, 0.0});
    std::vector<std::set<int>> adj(regions);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int p = y * w + x, l = labels[p];
            ++area[l];
            sum[l][0] += p0[p];
            sum[l][1] += p1[p];
            sum[l][2] += p2[p];
            if (x + 1 < w && labels[p + 1] != l) {
                adj[l].insert(labels[p + 1]);
                adj[labels[p + 1]].insert(l);
            }
            if (y + 1 < h && labels[p + w] != l) {
                adj[l].insert(labels[p + w]);
                adj[labels[p + w]].insert(l);
            }
        }
    std::vector<int> merged_into(regions);
    std::iota(merged_into.begin(), merged_into.end(), 0);
    std::set<std::pair<long, int>> small;
    for (int r = 0; r < regions; ++r)
        if (area[r] < min_size) small.insert({area[r], r});
    auto mean_dist = [&](int a, int b) {
        double d = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double t = sum[a][c] / area[a] - sum[b][c] / area[b];
            d += t * t;
        }
        return d;
    };
    while (!small.empty()) {
        const int r = small.begin()->second;
        small.erase(small.begin());
        if (adj[r].empty()) continue;  // whole image is one region
        int best = -1;
        double best_d = 0.0;
        for (int nb : adj[r]) {
            const double d = mean_dist(r, nb);
            if (best == -1 || d < best_d) {
                best = nb;
                best_d = d;
            }
        }
        small.erase({area[best], best});
        area[best] += area[r];
        for (int c = 0; c < 3; ++c) sum[best][c] += sum[r][c];
        for (int nb : adj[r]) {
            adj[nb].erase(r);
            if (nb != best) {
                adj[nb].insert(best);
                adj[best].insert(nb);
            }
        }
        adj[r].clear();
        merged_into[r] = best;
        if (area[best] < min_size) small.insert({area[best], best});
    }
    auto root = [&](int r) {
        while (merged_into[r] != r) r = merged_into[r];
        return r;
    };
    for (int& l : labels) l = root(l);

    // Compact ids in raster order of first appearance.
    std::vector<int> remap(regions, -1);
    int next = 0;
    for (int& l : labels) {
        if (remap[l] == -1) remap[l] = next++;
        l = remap[l];
    }
    return Segmentation(w, h, std::move(labels));
}

void save_label_png(const std::filesystem::path& path, const Segmentation& seg) {
    std::vector<std::uint16_t> values(seg.labels().size());
    std::transform(seg.labels().begin(), seg.labels().end(), values.begin(),
                   [](int l) { return static_cast<std::uint16_t>(std::min(l, 65535)); });
    save_png_gray16(path, seg.width(), seg.height(), values);
}

} // namespace lcnn
