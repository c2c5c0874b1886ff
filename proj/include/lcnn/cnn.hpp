#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lcnn/imaging.hpp"

namespace lcnn {

struct ConvSpec {
    int out_channels = 0;
    int filter = 1;
    int stride = 1;
    int padding = 0;
};
struct ReluSpec {};
struct PoolSpec {
    int size = 2;
    int stride = 2;
};
/// Cross-channel normalisation: x / (k + alpha/n * sum x^2)^beta.
struct LrnSpec {
    int n = 5;
    double k = 2.0;
    double alpha = 1e-4;
    double beta = 0.75;
};
/// Inverted dropout; identity at evaluation time.
struct DropoutSpec {
    double rate = 0.5;
};
struct FcSpec {
    int out_dim = 0;
};

using LayerSpec = std::variant<ConvSpec, ReluSpec, PoolSpec, LrnSpec, DropoutSpec, FcSpec>;

/// Layer stack up to and including the feature layer. A two-way
/// classifier is always appended after the last layer.
struct NetConfig {
    std::string name = "custom";
    int input_side = 227;
    int input_channels = 3;
    /// Std of the Gaussian weight init; 0 selects sqrt(2 / fan_in).
    double init_std = 0.01;
    std::vector<LayerSpec> layers;

    /// Output length of the last fully connected layer.
    int feature_dim() const;
};

/// Five conv stages (96/256/384/384/256) and two FC layers; fc7 has 512
/// outputs with the low-level embedding and 1024 without.
NetConfig alexnet_preset(bool embedding = true);
/// Same layer pattern at input 59 with 16/32/32/32/16 channels; fc7 has
/// 64 outputs with embedding and 128 without.
NetConfig toy_preset(bool embedding = true);

struct Shape {
    int channels = 0;
    int height = 0;
    int width = 0;

    long size() const { return static_cast<long>(channels) * height * width; }
    friend bool operator==(const Shape&, const Shape&) = default;
};

/// Output shape of every layer, classifier last. Throws with the offending
/// layer index when a spatial size becomes nonpositive.
std::vector<Shape> infer_shapes(const NetConfig& cfg);

/// Spatial input side of every conv layer and of the first FC layer.
std::vector<int> stage_input_sides(const NetConfig& cfg);
std::vector<int> conv_channels(const NetConfig& cfg);

enum class Mode { Train, Eval };

template <class T>
class Network {
public:
    struct Output {
        std::vector<T> logits;    ///< 2 per item
        std::vector<T> features;  ///< feature_dim per item
    };
    struct LossGrad {
        double loss = 0.0;
        double data_loss = 0.0;
        double decay_loss = 0.0;
        std::vector<std::vector<T>> grads;  ///< parallel to params()
    };
    struct ParamInfo {
        int layer = 0;        ///< index into the layer stack; the classifier is last
        bool is_weight = false;
        std::vector<int> dims;
    };

    Network() = default;
    /// Gaussian weights (see NetConfig::init_std), zero biases.
    Network(NetConfig cfg, std::uint64_t seed);

    const NetConfig& config() const { return cfg_; }
    const std::vector<Shape>& shapes() const { return shapes_; }
    int input_size() const { return cfg_.input_channels * cfg_.input_side * cfg_.input_side; }
    int feature_dim() const { return feature_dim_; }

    std::vector<std::vector<T>>& params() { return params_; }
    const std::vector<std::vector<T>>& params() const { return params_; }
    const std::vector<ParamInfo>& param_info() const { return info_; }

    /// `batch` holds n items of input_size() values each, planar C x H x W.
    Output forward(std::span<const T> batch, int n, Mode mode, std::uint64_t dropout_seed = 0) const;

    /// Mean softmax loss plus (lambda/2) * sum of squared weights (biases
    /// excluded), and its gradient. Runs in training mode.
    LossGrad loss_and_grad(std::span<const T> batch, std::span<const int> labels, double lambda,
                           std::uint64_t dropout_seed = 0) const;

    /// Loss only; `mode` selects whether dropout is active.
    double loss(std::span<const T> batch, std::span<const int> labels, double lambda, Mode mode,
                std::uint64_t dropout_seed = 0) const;

    double decay_term(double lambda) const;

private:
    struct Trace;

    void forward_item(const T* input, Mode mode, std::uint64_t seed, Trace& tr) const;
    void backward_item(const Trace& tr, const T* dlogits, std::vector<std::vector<T>>& grads) const;

    NetConfig cfg_;
    std::vector<LayerSpec> layers_;  // cfg layers + classifier
    std::vector<Shape> shapes_;
    std::vector<int> weight_index_;
    std::vector<std::vector<T>> params_;
    std::vector<ParamInfo> info_;
    int feature_layer_ = 0;
    int feature_dim_ = 0;
};

extern template class Network<float>;
extern template class Network<double>;

/// Momentum SGD state: one velocity buffer per parameter tensor.
template <class T>
struct SgdState {
    std::vector<std::vector<T>> velocity;
};

/// v <- mu v - lr g; theta <- theta + v.
template <class T>
void sgd_step(std::vector<std::vector<T>>& params, const std::vector<std::vector<T>>& grads, SgdState<T>& state,
              double learning_rate, double momentum);

struct TrainConfig {
    int batch = 256;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    double learning_rate = 0.01;
    double lr_decay = 0.1;
    int patience = 3;
    double plateau_eps = 1e-3;
    int epochs = 10;
    std::uint64_t seed = 1;
};

/// Learning-rate schedule: decays after `patience` evaluations without an
/// improvement larger than `plateau_eps`.
class PlateauSchedule {
public:
    PlateauSchedule(double lr, double decay, int patience, double eps);
    /// Records a validation loss; returns the learning rate to use next.
    double observe(double loss);
    double learning_rate() const { return lr_; }

private:
    double lr_;
    double decay_;
    int patience_;
    double eps_;
    double best_;
    int stale_ = 0;
    bool first_ = true;
};

/// Samples produced on demand: `fill(i, out)` writes input_size() values.
struct TrainingData {
    std::size_t count = 0;
    std::vector<int> labels;
    std::function<void(std::size_t, std::span<float>)> fill;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double learning_rate = 0.0;
};

std::vector<EpochLog> train_network(Network<float>& net, const TrainConfig& tc, const TrainingData& train,
                                    const TrainingData* validation,
                                    const std::function<void(const EpochLog&)>& on_epoch = {});

/// Trained network plus the per-pixel training mean subtracted from inputs.
struct CnnModel {
    Network<float> net;
    std::vector<float> mean;  ///< input_size() values

    /// Mean-subtracted network input for an RGB patch of the input side.
    void prepare_input(const Image& patch, std::span<float> out) const;
};

/// Post-ReLU fc7 activations, eval mode.
std::vector<float> extract_fc7(const CnnModel& model, std::span<const float> inputs, int n);

/// P(y = 1) per item, eval mode.
std::vector<float> positive_probability(const CnnModel& model, std::span<const float> inputs, int n);

/// Maps feature vectors through the classifier layer to P(y = 1).
std::vector<float> classifier_probability(const Network<float>& net, std::span<const float> features, int n);

void save_model(const std::filesystem::path& path, const CnnModel& model);
CnnModel load_model(const std::filesystem::path& path);

struct FilterGrid {
    Image image;
    int columns = 0;
    int rows = 0;
    int tile = 0;
};

/// First-layer filters as min-max normalised RGB tiles in a square grid
/// with one-pixel white gaps. A constant filter renders mid-gray.
FilterGrid export_first_layer_filters(const Network<float>& net);

struct GradCheckResult {
    double max_relative_error = 0.0;
    int checked = 0;
};

/// Compares analytic gradients with central differences on up to
/// `per_tensor` sampled entries of every parameter tensor.
GradCheckResult gradient_check(Network<double>& net, std::span<const double> batch, std::span<const int> labels,
                               double lambda, double eps, int per_tensor, std::uint64_t seed);

} // namespace lcnn
