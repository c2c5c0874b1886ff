#pragma once

// Fixtures shared by the unit tests and the acceptance runner.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lcnn/cnn.hpp"

namespace lcnn::fixtures {

struct NamedNet {
    std::string name;
    NetConfig cfg;
};

/// One small network per layer type, each wrapped between a convolution
/// and a fully connected layer so the type's backward pass feeds trainable
/// parameters, plus the composed toy preset.
inline std::vector<NamedNet> gradient_nets() {
    auto small = [](std::string name, std::vector<LayerSpec> layers) {
        NetConfig c;
        c.name = std::move(name);
        c.input_side = 9;
        c.input_channels = 3;
        c.init_std = 0.0;
        c.layers = std::move(layers);
        return NamedNet{c.name, c};
    };
    std::vector<NamedNet> nets = {
        small("conv", {ConvSpec{4, 3, 2, 1}, FcSpec{5}}),
        small("relu", {ConvSpec{4, 3, 1, 0}, ReluSpec{}, FcSpec{5}}),
        small("maxpool", {ConvSpec{4, 3, 1, 1}, PoolSpec{3, 2}, FcSpec{5}}),
        small("lrn", {ConvSpec{6, 3, 1, 1}, LrnSpec{5, 2.0, 0.5, 0.75}, FcSpec{5}}),
        small("dropout", {ConvSpec{4, 3, 1, 0}, DropoutSpec{0.5}, FcSpec{5}}),
        small("fc", {FcSpec{7}, ReluSpec{}, FcSpec{5}}),
    };
    NetConfig toy = toy_preset(true);
    nets.push_back({"toy", toy});
    return nets;
}

/// Largest relative error of the analytic gradient against central
/// differences for one network and seed, in double precision.
inline double gradient_error(const NetConfig& cfg, std::uint64_t seed, int per_tensor = 12) {
    Network<double> net(cfg, seed);
    // Nonzero biases so that every bias gradient is exercised through
    // active units.
    std::mt19937_64 rng(seed * 7919 + 1);
    std::normal_distribution<double> N(0.0, 0.1);
    for (std::size_t p = 0; p < net.params().size(); ++p)
        if (!net.param_info()[p].is_weight)
            for (auto& b : net.params()[p]) b = N(rng);
    const int n = 3;
    std::vector<double> batch(static_cast<std::size_t>(n) * net.input_size());
    std::normal_distribution<double> X(0.0, 1.0);
    for (auto& v : batch) v = X(rng);
    const std::vector<int> labels = {1, 0, 1};
    return gradient_check(net, batch, labels, 0.01, 1e-5, per_tensor, seed).max_relative_error;
}

} // namespace lcnn::fixtures
