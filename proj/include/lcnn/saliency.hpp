#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "lcnn/proposals.hpp"
#include "lcnn/segmentation.hpp"

namespace lcnn {

/// Per-pixel map, row-major. Raw accumulations and normalised maps share it.
struct SaliencyMap {
    int width = 0;
    int height = 0;
    std::vector<double> values;

    SaliencyMap() = default;
    SaliencyMap(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0.0) {}

    double& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

enum class AccumTarget { Mask, Box };

/// Adds max(0, score) of every proposal to the pixels of its mask or box.
SaliencyMap accumulate(const ProposalSet& ps, std::span<const double> scores, AccumTarget target = AccumTarget::Mask);

/// Min-max rescale to [0, 1]; a constant map becomes all zeros.
SaliencyMap normalize(const SaliencyMap& raw);

/// alpha * (segment mean) + (1 - alpha) * value, then renormalised.
SaliencyMap smooth(const SaliencyMap& map, const Segmentation& seg, double alpha = 0.5);

/// 8-bit grayscale PNG, value round(255 s) with s clamped to [0, 1].
void save_saliency_png(const std::filesystem::path& path, const SaliencyMap& map);
SaliencyMap load_saliency_png(const std::filesystem::path& path);

} // namespace lcnn
