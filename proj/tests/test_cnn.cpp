#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "lcnn/cnn.hpp"
#include "lcnn/error.hpp"
#include "test_util.hpp"

using namespace lcnn;

namespace {

NetConfig tiny(std::vector<LayerSpec> layers, int side = 6, int channels = 2) {
    NetConfig c;
    c.input_side = side;
    c.input_channels = channels;
    c.init_std = 0.1;
    c.layers = std::move(layers);
    return c;
}

template <class T>
std::vector<T> random_batch(const Network<T>& net, int n, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> N(0.0, 1.0);
    std::vector<T> b(static_cast<std::size_t>(n) * net.input_size());
    for (auto& v : b) v = static_cast<T>(N(rng));
    return b;
}

std::size_t classifier_bias(const Network<double>& net) { return net.params().size() - 1; }

} // namespace

TEST(Cnn, AlexnetPresetShapes) {
    const NetConfig cfg = alexnet_preset(true);
    EXPECT_EQ(stage_input_sides(cfg), (std::vector<int>{227, 27, 13, 13, 6, 2}));
    EXPECT_EQ(conv_channels(cfg), (std::vector<int>{96, 256, 384, 384, 256}));
    EXPECT_EQ(infer_shapes(cfg).back(), (Shape{2, 1, 1}));
    EXPECT_EQ(cfg.feature_dim(), 512);
    EXPECT_EQ(alexnet_preset(false).feature_dim(), 1024);
}

TEST(Cnn, ToyPresetShapes) {
    const NetConfig cfg = toy_preset(true);
    const auto sides = stage_input_sides(cfg);
    ASSERT_EQ(sides.size(), 6u);
    EXPECT_EQ(sides[0], 59);
    // conv 11 / stride 4: (59 - 11) / 4 + 1 = 13; pool 3 / stride 2: (13 - 3) / 2 + 1 = 6.
    const auto shapes = infer_shapes(cfg);
    EXPECT_EQ(shapes[0], (Shape{16, 13, 13}));
    EXPECT_EQ(shapes[2], (Shape{16, 6, 6}));
    EXPECT_EQ(sides[1], 6);
    EXPECT_EQ(conv_channels(cfg), (std::vector<int>{16, 32, 32, 32, 16}));
    EXPECT_EQ(cfg.feature_dim(), 64);
    EXPECT_EQ(toy_preset(false).feature_dim(), 128);
}

TEST(Cnn, UnitConvolutionKeepsSpatialSize) {
    const auto shapes = infer_shapes(tiny({ConvSpec{5, 1, 1, 0}, FcSpec{3}}, 7, 2));
    EXPECT_EQ(shapes[0], (Shape{5, 7, 7}));
}

TEST(Cnn, ShapeInferenceNamesOffendingLayer) {
    try {
        infer_shapes(tiny({ConvSpec{4, 3, 1, 0}, PoolSpec{3, 3}, PoolSpec{3, 3}, FcSpec{2}}, 8));
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("layer 2"), std::string::npos) << e.what();
    }
}

TEST(Cnn, ForwardMatchesInferredShapes) {
    const Network<float> net(toy_preset(false), 3);
    const auto batch = random_batch(net, 2, 1);
    const auto out = net.forward(batch, 2, Mode::Eval);
    EXPECT_EQ(out.logits.size(), 4u);
    EXPECT_EQ(out.features.size(), 2u * 128u);
    EXPECT_EQ(net.feature_dim(), 128);
}

TEST(Cnn, ZeroInputGivesClassifierBias) {
    Network<double> net(toy_preset(true), 5);
    net.params()[classifier_bias(net)] = {0.3, -0.2};
    const std::vector<double> zeros(2 * static_cast<std::size_t>(net.input_size()), 0.0);
    const auto out = net.forward(zeros, 2, Mode::Eval);
    for (int i = 0; i < 2; ++i) {
        EXPECT_EQ(out.logits[2 * i], 0.3);
        EXPECT_EQ(out.logits[2 * i + 1], -0.2);
    }
    for (double f : out.features) EXPECT_EQ(f, 0.0);
}

TEST(Cnn, DropoutRateZeroIsIdentity) {
    const Network<double> net(tiny({ConvSpec{3, 3, 1, 1}, ReluSpec{}, DropoutSpec{0.0}, FcSpec{4}, DropoutSpec{0.0}}), 2);
    const auto batch = random_batch(net, 3, 2);
    const auto train = net.forward(batch, 3, Mode::Train, 99);
    const auto eval = net.forward(batch, 3, Mode::Eval);
    EXPECT_EQ(train.logits, eval.logits);
}

TEST(Cnn, DropoutIsSeededInTrainingAndOffInEval) {
    const Network<double> net(tiny({FcSpec{40}, ReluSpec{}, DropoutSpec{0.5}, FcSpec{8}}), 2);
    const auto batch = random_batch(net, 2, 3);
    EXPECT_EQ(net.forward(batch, 2, Mode::Train, 7).logits, net.forward(batch, 2, Mode::Train, 7).logits);
    EXPECT_NE(net.forward(batch, 2, Mode::Train, 7).logits, net.forward(batch, 2, Mode::Train, 8).logits);
    EXPECT_EQ(net.forward(batch, 2, Mode::Eval, 7).logits, net.forward(batch, 2, Mode::Eval, 8).logits);
}

TEST(Cnn, LrnWithoutAlphaIsIdentity) {
    const Network<double> plain(tiny({ConvSpec{6, 3, 1, 1}, FcSpec{4}}), 4);
    const Network<double> lrn(tiny({ConvSpec{6, 3, 1, 1}, LrnSpec{5, 1.0, 0.0, 0.75}, FcSpec{4}}), 4);
    const auto batch = random_batch(plain, 2, 4);
    EXPECT_EQ(plain.forward(batch, 2, Mode::Eval).logits, lrn.forward(batch, 2, Mode::Eval).logits);
}

TEST(Cnn, MaxPoolIgnoresDuplicatedMaximum) {
    const Network<double> net(tiny({PoolSpec{2, 2}, FcSpec{3}}, 4, 1), 6);
    std::vector<double> x = random_batch(net, 1, 6);
    const auto before = net.forward(x, 1, Mode::Eval).logits;
    // Copy the maximum of the top-left window onto another cell of it.
    int arg = 0;
    const int cells[4] = {0, 1, 4, 5};
    for (int c : cells)
        if (x[c] > x[arg]) arg = c;
    x[arg == 0 ? 5 : 0] = x[arg];
    EXPECT_EQ(net.forward(x, 1, Mode::Eval).logits, before);
}

TEST(Cnn, EvalForwardIsBitwiseDeterministic) {
    const Network<float> net(toy_preset(true), 8);
    const auto batch = random_batch(net, 5, 8);
    const auto a = net.forward(batch, 5, Mode::Eval);
    const auto b = net.forward(batch, 5, Mode::Eval);
    ASSERT_EQ(a.logits.size(), b.logits.size());
    EXPECT_EQ(std::memcmp(a.logits.data(), b.logits.data(), a.logits.size() * sizeof(float)), 0);
    EXPECT_EQ(std::memcmp(a.features.data(), b.features.data(), a.features.size() * sizeof(float)), 0);
}

TEST(Cnn, UniformLogitsCostLn2) {
    Network<double> net(toy_preset(true), 9);
    for (auto& p : net.params()) std::fill(p.begin(), p.end(), 0.0);
    for (int n : {1, 3, 8}) {
        const auto batch = random_batch(net, n, 9);
        std::vector<int> labels(n);
        for (int i = 0; i < n; ++i) labels[i] = i % 2;
        EXPECT_NEAR(net.loss(batch, labels, 0.0, Mode::Eval), std::numbers::ln2, 1e-12);
        EXPECT_NEAR(net.loss_and_grad(batch, labels, 0.0).loss, std::numbers::ln2, 1e-12);
    }
}

TEST(Cnn, ConfidentCorrectPredictionsCostNothing) {
    Network<double> net(tiny({FcSpec{3}}), 1);
    for (auto& p : net.params()) std::fill(p.begin(), p.end(), 0.0);
    net.params()[classifier_bias(net)] = {-60.0, 60.0};
    const auto batch = random_batch(net, 4, 1);
    EXPECT_LT(net.loss(batch, std::vector<int>{1, 1, 1, 1}, 0.0, Mode::Eval), 1e-20);
}

TEST(Cnn, WeightDecayTermByHand) {
    Network<double> net(tiny({ConvSpec{2, 3, 1, 0}, FcSpec{3}}, 4, 1), 1);
    double squares = 0.0;
    int k = 0;
    for (std::size_t p = 0; p < net.params().size(); ++p)
        for (auto& v : net.params()[p]) {
            v = 0.01 * (k % 17) - 0.05;
            ++k;
            if (net.param_info()[p].is_weight) squares += v * v;
        }
    const double lambda = 0.0005;
    EXPECT_NEAR(net.decay_term(lambda), 0.5 * lambda * squares, 1e-12);
    const auto batch = random_batch(net, 2, 2);
    const auto lg = net.loss_and_grad(batch, std::vector<int>{0, 1}, lambda);
    EXPECT_NEAR(lg.decay_loss, 0.5 * lambda * squares, 1e-12);
    EXPECT_NEAR(lg.loss, lg.data_loss + lg.decay_loss, 1e-12);
}

TEST(Cnn, ParameterShapesFollowConfig) {
    const Network<float> net(tiny({ConvSpec{4, 3, 1, 0}, FcSpec{5}}, 6, 2), 1);
    const auto& info = net.param_info();
    ASSERT_EQ(info.size(), 6u);
    EXPECT_EQ(info[0].dims, (std::vector<int>{4, 2, 3, 3}));
    EXPECT_EQ(info[1].dims, (std::vector<int>{4}));
    EXPECT_EQ(info[2].dims, (std::vector<int>{5, 64}));
    EXPECT_EQ(info[4].dims, (std::vector<int>{2, 5}));
    for (std::size_t p = 0; p < info.size(); ++p) {
        long n = 1;
        for (int d : info[p].dims) n *= d;
        EXPECT_EQ(static_cast<long>(net.params()[p].size()), n);
    }
}

class GradientCheck : public ::testing::TestWithParam<int> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
    const auto nets = fixtures::gradient_nets();
    const auto& named = nets[static_cast<std::size_t>(GetParam())];
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const double err = fixtures::gradient_error(named.cfg, seed);
        EXPECT_LE(err, 1e-4) << named.name << " seed " << seed;
    }
}

INSTANTIATE_TEST_SUITE_P(LayerTypes, GradientCheck, ::testing::Range(0, 7), [](const auto& info) {
    return fixtures::gradient_nets()[static_cast<std::size_t>(info.param)].name;
});

TEST(Cnn, SgdZeroGradientIsNoOp) {
    std::vector<std::vector<double>> params = {{1.0, -2.0}};
    const std::vector<std::vector<double>> zero = {{0.0, 0.0}};
    SgdState<double> state;
    sgd_step(params, zero, state, 0.1, 0.9);
    EXPECT_EQ(params[0], (std::vector<double>{1.0, -2.0}));
}

TEST(Cnn, SgdWithoutMomentumIsPlainDescent) {
    std::vector<std::vector<double>> params = {{1.0, -2.0}};
    const std::vector<std::vector<double>> g = {{0.5, 4.0}};
    SgdState<double> state;
    sgd_step(params, g, state, 0.1, 0.0);
    EXPECT_DOUBLE_EQ(params[0][0], 0.95);
    EXPECT_DOUBLE_EQ(params[0][1], -2.4);
}

TEST(Cnn, SgdMomentumTwoStepDisplacement) {
    std::vector<std::vector<double>> params = {{0.0}};
    const std::vector<std::vector<double>> g = {{2.0}};
    SgdState<double> state;
    sgd_step(params, g, state, 0.01, 0.9);
    sgd_step(params, g, state, 0.01, 0.9);
    EXPECT_NEAR(params[0][0], -0.01 * 2.0 * (1.0 + 1.9), 1e-15);
}

TEST(Cnn, PlateauScheduleDecaysAfterPatience) {
    PlateauSchedule s(0.01, 0.1, 3, 1e-3);
    EXPECT_DOUBLE_EQ(s.observe(1.0), 0.01);
    EXPECT_DOUBLE_EQ(s.observe(0.5), 0.01);
    EXPECT_DOUBLE_EQ(s.observe(0.4999), 0.01);
    EXPECT_DOUBLE_EQ(s.observe(0.4998), 0.01);
    EXPECT_NEAR(s.observe(0.4997), 0.001, 1e-15);
    EXPECT_NEAR(s.observe(0.3), 0.001, 1e-15);
}

TEST(Cnn, SgdDrivesSeparableLossDown) {
    // Bright left half versus bright right half.
    Network<float> net(tiny({ConvSpec{4, 3, 1, 1}, ReluSpec{}, PoolSpec{2, 2}, FcSpec{8}, ReluSpec{}}, 8, 3), 11);
    const int n = 32;
    std::mt19937 rng(11);
    std::uniform_real_distribution<float> U(-0.1f, 0.1f);
    std::vector<float> batch(static_cast<std::size_t>(n) * net.input_size());
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
        labels[i] = i % 2;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < 8; ++y)
                for (int x = 0; x < 8; ++x)
                    batch[static_cast<std::size_t>(i) * net.input_size() + (c * 8 + y) * 8 + x] =
                        ((x < 4) == (labels[i] == 1) ? 1.0f : -1.0f) + U(rng);
    }
    SgdState<float> state;
    double last = 0.0;
    for (int step = 0; step < 200; ++step) {
        const auto lg = net.loss_and_grad(batch, labels, 0.0005, static_cast<std::uint64_t>(step));
        last = lg.loss;
        sgd_step(net.params(), lg.grads, state, 0.01, 0.9);
    }
    last = net.loss(batch, labels, 0.0005, Mode::Eval);
    EXPECT_LT(last, std::numbers::ln2 / 4.0);
}

TEST(Cnn, NonFiniteActivationNamesLayer) {
    Network<double> net(tiny({ConvSpec{2, 3, 1, 0}, ReluSpec{}, FcSpec{3}}), 1);
    net.params()[0][0] = std::numeric_limits<double>::quiet_NaN();
    const auto batch = random_batch(net, 1, 1);
    try {
        net.forward(batch, 1, Mode::Eval);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos) << e.what();
    }
}

TEST(Cnn, TrainNetworkLogsEveryEpoch) {
    Network<float> net(tiny({ConvSpec{4, 3, 1, 1}, ReluSpec{}, FcSpec{6}, ReluSpec{}}, 6, 3), 2);
    TrainingData data;
    data.count = 40;
    for (std::size_t i = 0; i < data.count; ++i) data.labels.push_back(static_cast<int>(i % 2));
    data.fill = [&](std::size_t i, std::span<float> out) {
        for (std::size_t k = 0; k < out.size(); ++k) out[k] = (i % 2 ? 1.0f : -1.0f) * static_cast<float>(k % 6 < 3);
    };
    TrainConfig tc;
    tc.batch = 8;
    tc.epochs = 3;
    int calls = 0;
    const auto log = train_network(net, tc, data, &data, [&](const EpochLog&) { ++calls; });
    ASSERT_EQ(log.size(), 3u);
    EXPECT_EQ(calls, 3);
    EXPECT_LT(log.back().val_loss, log.front().val_loss + 1e-9);
    for (const auto& e : log) EXPECT_TRUE(std::isfinite(e.train_loss));
}

TEST(Cnn, TrainingIsDeterministic) {
    auto run = [] {
        Network<float> net(tiny({ConvSpec{4, 3, 1, 1}, ReluSpec{}, DropoutSpec{0.5}, FcSpec{6}}, 6, 3), 2);
        TrainingData data;
        data.count = 30;
        for (std::size_t i = 0; i < data.count; ++i) data.labels.push_back(static_cast<int>(i % 3 == 0));
        data.fill = [](std::size_t i, std::span<float> out) {
            for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::sin(static_cast<float>(i * 31 + k));
        };
        TrainConfig tc;
        tc.batch = 7;
        tc.epochs = 2;
        train_network(net, tc, data, nullptr);
        return net.params();
    };
    EXPECT_EQ(run(), run());
}

TEST(Cnn, Fc7IsNonNegative) {
    CnnModel model{Network<float>(toy_preset(true), 4), {}};
    model.mean.assign(model.net.input_size(), 0.1f);
    const auto batch = random_batch(model.net, 3, 4);
    const auto f = extract_fc7(model, batch, 3);
    ASSERT_EQ(f.size(), 3u * 64u);
    for (float v : f) EXPECT_GE(v, 0.0f);
    const auto p = positive_probability(model, batch, 3);
    const auto q = classifier_probability(model.net, f, 3);
    for (int i = 0; i < 3; ++i) {
        EXPECT_GE(p[i], 0.0f);
        EXPECT_LE(p[i], 1.0f);
        EXPECT_NEAR(p[i], q[i], 1e-6);
    }
}

TEST(Cnn, ModelRoundTrip) {
    test::TempDir dir;
    CnnModel model{Network<float>(toy_preset(true), 12), {}};
    model.mean.resize(model.net.input_size());
    for (std::size_t i = 0; i < model.mean.size(); ++i) model.mean[i] = 0.001f * static_cast<float>(i % 97);
    save_model(dir / "m.lcnn", model);
    const CnnModel back = load_model(dir / "m.lcnn");
    EXPECT_EQ(back.net.params(), model.net.params());
    EXPECT_EQ(back.mean, model.mean);
    EXPECT_EQ(back.net.config().name, model.net.config().name);
    EXPECT_EQ(infer_shapes(back.net.config()), infer_shapes(model.net.config()));
    const auto batch = random_batch(model.net, 2, 12);
    EXPECT_EQ(extract_fc7(back, batch, 2), extract_fc7(model, batch, 2));
}

TEST(Cnn, ModelRejectsForeignFile) {
    test::TempDir dir;
    save_png_gray8(dir / "x.png", 1, 1, std::vector<std::uint8_t>{0});
    EXPECT_THROW(load_model(dir / "x.png"), FormatError);
}

TEST(Cnn, FilterGridForAlexnetPreset) {
    Network<float> net(alexnet_preset(true), 1);
    auto& w = net.params()[0];
    std::fill(w.begin(), w.begin() + 3 * 11 * 11, 0.3f);
    const FilterGrid g = export_first_layer_filters(net);
    EXPECT_EQ(g.tile, 11);
    EXPECT_EQ(g.columns, 10);
    EXPECT_EQ(g.rows, 10);
    EXPECT_GE(g.columns * g.rows, 96);
    for (int c = 0; c < 3; ++c)
        for (int y = 1; y <= 11; ++y)
            for (int x = 1; x <= 11; ++x) EXPECT_EQ(g.image.at(c, x, y), 0.5);
    for (double v : g.image.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}
