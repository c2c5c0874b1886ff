#include "lcnn/saliency.hpp"

#include <algorithm>
#include <cmath>

#include "lcnn/error.hpp"

namespace lcnn {

SaliencyMap accumulate(const ProposalSet& ps, std::span<const double> scores, AccumTarget target) {
    if (scores.size() != ps.proposals.size()) throw Error("accumulate: one score per proposal is required");
    SaliencyMap map(ps.width, ps.height);
    for (std::size_t i = 0; i < ps.proposals.size(); ++i) {
        const Proposal& p = ps.proposals[i];
        if (p.mask.width() != ps.width || p.mask.height() != ps.height) throw Error("accumulate: proposal size mismatch");
        const double s = std::max(0.0, scores[i]);
        if (s == 0.0) continue;
        if (target == AccumTarget::Mask) {
            p.mask.for_each([&](int x, int y) { map.at(x, y) += s; });
        } else {
            for (int y = p.box.y0; y < p.box.y1; ++y)
                for (int x = p.box.x0; x < p.box.x1; ++x) map.at(x, y) += s;
        }
    }
    return map;
}

SaliencyMap normalize(const SaliencyMap& raw) {
    SaliencyMap out = raw;
    if (raw.values.empty()) return out;
    const auto [lo, hi] = std::minmax_element(raw.values.begin(), raw.values.end());
    const double min = *lo, range = *hi - *lo;
    for (double& v : out.values) v = range > 0.0 ? (v - min) / range : 0.0;
    return out;
}

SaliencyMap smooth(const SaliencyMap& map, const Segmentation& seg, double alpha) {
    if (seg.width() != map.width || seg.height() != map.height) throw Error("smooth: segmentation size mismatch");
    if (alpha < 0.0 || alpha > 1.0) throw Error("smooth: blend must lie in [0, 1]");
    if (alpha == 0.0) return map;
    std::vector<double> sum(static_cast<std::size_t>(seg.region_count()), 0.0);
    for (std::size_t i = 0; i < map.values.size(); ++i) sum[seg.labels()[i]] += map.values[i];
    SaliencyMap out = map;
    for (std::size_t i = 0; i < map.values.size(); ++i) {
        const int r = seg.labels()[i];
        const double mean = sum[r] / static_cast<double>(seg.regions()[r].area);
        out.values[i] = alpha * mean + (1.0 - alpha) * map.values[i];
    }
    return normalize(out);
}

void save_saliency_png(const std::filesystem::path& path, const SaliencyMap& map) {
    std::vector<std::uint8_t> bytes(map.values.size());
    std::transform(map.values.begin(), map.values.end(), bytes.begin(), [](double v) {
        return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
    });
    save_png_gray8(path, map.width, map.height, bytes);
}

SaliencyMap load_saliency_png(const std::filesystem::path& path) {
    const Gray8 g = load_png_gray8(path);
    SaliencyMap m(g.width, g.height);
    for (std::size_t i = 0; i < g.values.size(); ++i) m.values[i] = g.values[i] / 255.0;
    return m;
}

} // namespace lcnn
