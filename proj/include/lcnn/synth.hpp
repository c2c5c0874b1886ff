#pragma once

#include <cstdint>
#include <filesystem>

#include "lcnn/imaging.hpp"

namespace lcnn {

struct SynthParams {
    int train = 300;
    int test = 100;
    int width = 128;
    int height = 96;
    std::uint64_t seed = 1;
    double min_fraction = 0.05;
    double max_fraction = 0.40;
};

struct SynthSample {
    Image rgb;
    RegionMask gt;
};

/// One or two flat-coloured rectangles or ellipses on a striped, noisy
/// background of contrasting colour. The foreground fraction lies in
/// [min_fraction, max_fraction]. Deterministic in (seed, index).
SynthSample synth_sample(const SynthParams& p, std::uint64_t index);

/// Writes images/, gt/ and manifest.csv under `dir`; train samples come
/// first, then test samples.
void write_synthetic_dataset(const SynthParams& p, const std::filesystem::path& dir);

} // namespace lcnn
