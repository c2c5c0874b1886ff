#include "lcnn/cnn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "lcnn/binary_io.hpp"
#include "lcnn/error.hpp"
#include "lcnn/parallel.hpp"

namespace lcnn {

namespace {

constexpr int kClasses = 2;
constexpr int kLossChunks = 8;

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

std::uint64_t item_seed(std::uint64_t seed, std::size_t item) {
    return splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(item) + 1));
}

// C[M][N] += A[M][K] * B[K][N]
template <class T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C) {
    for (int i = 0; i < M; ++i) {
        T* c = C + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const T a = A[static_cast<std::size_t>(i) * K + k];
            const T* b = B + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

// C[M][N] += A[K][M]^T * B[K][N]
template <class T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C) {
    for (int k = 0; k < K; ++k) {
        const T* b = B + static_cast<std::size_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            const T a = A[static_cast<std::size_t>(k) * M + i];
            T* c = C + static_cast<std::size_t>(i) * N;
            for (int j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

template <class T>
void im2col(const T* in, const Shape& s, const ConvSpec& cs, int oh, int ow, T* col) {
    const int k = cs.filter;
    for (int c = 0; c < s.channels; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * cs.stride - cs.padding + ky;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * cs.stride - cs.padding + kx;
                        row[oy * ow + ox] = (iy >= 0 && iy < s.height && ix >= 0 && ix < s.width)
                                                ? in[(static_cast<std::size_t>(c) * s.height + iy) * s.width + ix]
                                                : T(0);
                    }
                }
            }
}

template <class T>
void col2im(const T* col, const Shape& s, const ConvSpec& cs, int oh, int ow, T* in) {
    const int k = cs.filter;
    for (int c = 0; c < s.channels; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * cs.stride - cs.padding + ky;
                    if (iy < 0 || iy >= s.height) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * cs.stride - cs.padding + kx;
                        if (ix < 0 || ix >= s.width) continue;
                        in[(static_cast<std::size_t>(c) * s.height + iy) * s.width + ix] += row[oy * ow + ox];
                    }
                }
            }
}

std::pair<int, int> lrn_window(int c, int channels, int n) {
    return {std::max(0, c - n / 2), std::min(channels - 1, c + n / 2)};
}

} // namespace

// ---------------------------------------------------------------------------
// Configurations

int NetConfig::feature_dim() const {
    for (auto it = layers.rbegin(); it != layers.rend(); ++it)
        if (const auto* fc = std::get_if<FcSpec>(&*it)) return fc->out_dim;
    throw Error("network config has no fully connected layer");
}

namespace {

NetConfig five_stage(std::string name, int side, const int channels[5], int fc6, int fc7, double init_std,
                     PoolSpec pool2, PoolSpec pool4, PoolSpec pool5) {
    NetConfig cfg;
    cfg.name = std::move(name);
    cfg.input_side = side;
    cfg.init_std = init_std;
    cfg.layers = {
        ConvSpec{channels[0], 11, 4, 0}, ReluSpec{}, PoolSpec{3, 2}, LrnSpec{},
        ConvSpec{channels[1], 5, 1, 2}, ReluSpec{}, pool2, LrnSpec{},
        ConvSpec{channels[2], 3, 1, 1}, ReluSpec{},
        ConvSpec{channels[3], 3, 1, 1}, ReluSpec{}, pool4,
        ConvSpec{channels[4], 3, 1, 1}, ReluSpec{}, pool5,
        FcSpec{fc6}, ReluSpec{}, DropoutSpec{},
        FcSpec{fc7}, ReluSpec{}, DropoutSpec{},
    };
    return cfg;
}

} // namespace

NetConfig alexnet_preset(bool embedding) {
    static constexpr int channels[5] = {96, 256, 384, 384, 256};
    return five_stage(embedding ? "alexnet" : "alexnet-baseline", 227, channels, 1024, embedding ? 512 : 1024, 0.01,
                      PoolSpec{3, 2}, PoolSpec{3, 2}, PoolSpec{3, 3});
}

NetConfig toy_preset(bool embedding) {
    static constexpr int channels[5] = {16, 32, 32, 32, 16};
    return five_stage(embedding ? "toy" : "toy-baseline", 59, channels, 128, embedding ? 64 : 128, 0.0,
                      PoolSpec{2, 1}, PoolSpec{3, 1}, PoolSpec{2, 1});
}

std::vector<Shape> infer_shapes(const NetConfig& cfg) {
    if (cfg.input_side < 1 || cfg.input_channels < 1) throw Error("network input must be positive");
    std::vector<Shape> out;
    Shape s{cfg.input_channels, cfg.input_side, cfg.input_side};
    bool flat = false;
    auto fail = [](std::size_t i, const std::string& why) {
        throw Error("layer " + std::to_string(i) + ": " + why);
    };
    for (std::size_t i = 0; i <= cfg.layers.size(); ++i) {
        const LayerSpec spec = i < cfg.layers.size() ? cfg.layers[i] : LayerSpec{FcSpec{kClasses}};
        std::visit(Overloaded{
                       [&](const ConvSpec& c) {
                           if (flat) fail(i, "convolution after a fully connected layer");
                           if (c.out_channels < 1 || c.filter < 1 || c.stride < 1 || c.padding < 0)
                               fail(i, "invalid convolution parameters");
                           if (s.height + 2 * c.padding < c.filter || s.width + 2 * c.padding < c.filter)
                               s = {c.out_channels, 0, 0};
                           else
                               s = {c.out_channels, (s.height + 2 * c.padding - c.filter) / c.stride + 1,
                                    (s.width + 2 * c.padding - c.filter) / c.stride + 1};
                       },
                       [&](const PoolSpec& p) {
                           if (flat) fail(i, "pooling after a fully connected layer");
                           if (p.size < 1 || p.stride < 1) fail(i, "invalid pooling parameters");
                           if (s.height < p.size || s.width < p.size) s.height = 0;
                           else s = {s.channels, (s.height - p.size) / p.stride + 1, (s.width - p.size) / p.stride + 1};
                       },
                       [&](const LrnSpec& l) {
                           if (l.n < 1 || l.k <= 0.0 || l.alpha < 0.0) fail(i, "invalid LRN parameters");
                       },
                       [&](const DropoutSpec& d) {
                           if (d.rate < 0.0 || d.rate >= 1.0) fail(i, "dropout rate must be in [0, 1)");
                       },
                       [&](const ReluSpec&) {},
                       [&](const FcSpec& f) {
                           if (f.out_dim < 1) fail(i, "fully connected output must be positive");
                           s = {f.out_dim, 1, 1};
                           flat = true;
                       },
                   },
                   spec);
        if (s.height < 1 || s.width < 1) fail(i, "nonpositive spatial size");
        out.push_back(s);
    }
    return out;
}

std::vector<int> stage_input_sides(const NetConfig& cfg) {
    const auto shapes = infer_shapes(cfg);
    std::vector<int> sides;
    int side = cfg.input_side;
    for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
        if (std::holds_alternative<ConvSpec>(cfg.layers[i])) sides.push_back(side);
        if (std::holds_alternative<FcSpec>(cfg.layers[i])) {
            sides.push_back(side);
            break;
        }
        side = shapes[i].height;
    }
    return sides;
}

std::vector<int> conv_channels(const NetConfig& cfg) {
    std::vector<int> out;
    for (const auto& l : cfg.layers)
        if (const auto* c = std::get_if<ConvSpec>(&l)) out.push_back(c->out_channels);
    return out;
}

// ---------------------------------------------------------------------------
// Network

template <class T>
struct Network<T>::Trace {
    std::vector<std::vector<T>> act;  // act[0] input, act[i + 1] output of layer i
    std::vector<std::vector<T>> aux;  // conv columns, LRN scales, dropout multipliers
    std::vector<std::vector<int>> argmax;
};

template <class T>
Network<T>::Network(NetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    shapes_ = infer_shapes(cfg_);
    layers_ = cfg_.layers;
    layers_.push_back(FcSpec{kClasses});
    feature_dim_ = cfg_.feature_dim();
    for (std::size_t i = 0; i < cfg_.layers.size(); ++i)
        if (std::holds_alternative<FcSpec>(cfg_.layers[i])) feature_layer_ = static_cast<int>(i);
    if (feature_layer_ + 1 < static_cast<int>(cfg_.layers.size()) &&
        std::holds_alternative<ReluSpec>(cfg_.layers[feature_layer_ + 1]))
        ++feature_layer_;

    std::mt19937_64 rng(seed);
    weight_index_.assign(layers_.size(), -1);
    Shape in{cfg_.input_channels, cfg_.input_side, cfg_.input_side};
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        int fan_in = 0, out = 0;
        std::vector<int> wdims;
        if (const auto* c = std::get_if<ConvSpec>(&layers_[i])) {
            fan_in = in.channels * c->filter * c->filter;
            out = c->out_channels;
            wdims = {c->out_channels, in.channels, c->filter, c->filter};
        } else if (const auto* f = std::get_if<FcSpec>(&layers_[i])) {
            fan_in = static_cast<int>(in.size());
            out = f->out_dim;
            wdims = {f->out_dim, fan_in};
        }
        if (out > 0) {
            const double stdv = cfg_.init_std > 0.0 ? cfg_.init_std : std::sqrt(2.0 / fan_in);
            std::normal_distribution<double> dist(0.0, stdv);
            std::vector<T> w(static_cast<std::size_t>(out) * fan_in);
            for (auto& v : w) v = static_cast<T>(dist(rng));
            weight_index_[i] = static_cast<int>(params_.size());
            params_.push_back(std::move(w));
            info_.push_back({static_cast<int>(i), true, wdims});
            params_.emplace_back(static_cast<std::size_t>(out), T(0));
            info_.push_back({static_cast<int>(i), false, {out}});
        }
        in = shapes_[i];
    }
}

template <class T>
void Network<T>::forward_item(const T* input, Mode mode, std::uint64_t seed, Trace& tr) const {
    const std::size_t L = layers_.size();
    tr.act.resize(L + 1);
    tr.aux.resize(L);
    tr.argmax.resize(L);
    tr.act[0].assign(input, input + input_size());
    Shape in{cfg_.input_channels, cfg_.input_side, cfg_.input_side};
    for (std::size_t i = 0; i < L; ++i) {
        const Shape& os = shapes_[i];
        const std::vector<T>& x = tr.act[i];
        std::vector<T>& y = tr.act[i + 1];
        y.assign(static_cast<std::size_t>(os.size()), T(0));
        std::visit(Overloaded{
                       [&](const ConvSpec& c) {
                           const int P = os.height * os.width;
                           const int R = in.channels * c.filter * c.filter;
                           auto& col = tr.aux[i];
                           col.resize(static_cast<std::size_t>(R) * P);
                           im2col(x.data(), in, c, os.height, os.width, col.data());
                           const auto& b = params_[weight_index_[i] + 1];
                           for (int o = 0; o < os.channels; ++o)
                               std::fill_n(y.begin() + static_cast<std::ptrdiff_t>(o) * P, P, b[o]);
                           gemm_nn(os.channels, P, R, params_[weight_index_[i]].data(), col.data(), y.data());
                       },
                       [&](const ReluSpec&) {
                           for (std::size_t j = 0; j < y.size(); ++j) y[j] = x[j] > T(0) ? x[j] : T(0);
                       },
                       [&](const PoolSpec& p) {
                           auto& am = tr.argmax[i];
                           am.resize(y.size());
                           for (int c = 0; c < os.channels; ++c)
                               for (int oy = 0; oy < os.height; ++oy)
                                   for (int ox = 0; ox < os.width; ++ox) {
                                       int best = (c * in.height + oy * p.stride) * in.width + ox * p.stride;
                                       for (int dy = 0; dy < p.size; ++dy)
                                           for (int dx = 0; dx < p.size; ++dx) {
                                               const int idx = (c * in.height + oy * p.stride + dy) * in.width + ox * p.stride + dx;
                                               if (x[idx] > x[best]) best = idx;
                                           }
                                       const std::size_t o = (static_cast<std::size_t>(c) * os.height + oy) * os.width + ox;
                                       am[o] = best;
                                       y[o] = x[best];
                                   }
                       },
                       [&](const LrnSpec& l) {
                           const int P = in.height * in.width;
                           auto& scale = tr.aux[i];
                           scale.assign(x.size(), T(0));
                           const T a = static_cast<T>(l.alpha / l.n);
                           for (int c = 0; c < in.channels; ++c) {
                               const auto [lo, hi] = lrn_window(c, in.channels, l.n);
                               for (int p = 0; p < P; ++p) {
                                   T acc = 0;
                                   for (int q = lo; q <= hi; ++q) {
                                       const T v = x[static_cast<std::size_t>(q) * P + p];
                                       acc += v * v;
                                   }
                                   const std::size_t idx = static_cast<std::size_t>(c) * P + p;
                                   scale[idx] = static_cast<T>(l.k) + a * acc;
                                   y[idx] = x[idx] * static_cast<T>(std::pow(scale[idx], static_cast<T>(-l.beta)));
                               }
                           }
                       },
                       [&](const DropoutSpec& d) {
                           if (mode == Mode::Eval || d.rate == 0.0) {
                               y = x;
                               tr.aux[i].clear();
                               return;
                           }
                           auto& mult = tr.aux[i];
                           mult.resize(x.size());
                           const std::uint64_t base = splitmix64(seed + 0x632BE59BD9B4E019ull * (i + 1));
                           const T keep_scale = static_cast<T>(1.0 / (1.0 - d.rate));
                           for (std::size_t j = 0; j < x.size(); ++j) {
                               const double u = static_cast<double>(splitmix64(base + j) >> 11) * 0x1p-53;
                               mult[j] = u >= d.rate ? keep_scale : T(0);
                               y[j] = x[j] * mult[j];
                           }
                       },
                       [&](const FcSpec& f) {
                           const int n_in = static_cast<int>(x.size());
                           const auto& W = params_[weight_index_[i]];
                           const auto& b = params_[weight_index_[i] + 1];
                           for (int o = 0; o < f.out_dim; ++o) {
                               const T* w = W.data() + static_cast<std::size_t>(o) * n_in;
                               T acc = 0;
                               for (int j = 0; j < n_in; ++j) acc += w[j] * x[j];
                               y[o] = acc + b[o];
                           }
                       },
                   },
                   layers_[i]);
        for (const T v : y)
            if (!std::isfinite(v)) throw Error("non-finite activation at layer " + std::to_string(i));
        in = os;
    }
}

template <class T>
void Network<T>::backward_item(const Trace& tr, const T* dlogits, std::vector<std::vector<T>>& grads) const {
    const std::size_t L = layers_.size();
    std::vector<T> g(dlogits, dlogits + kClasses), gin;
    for (std::size_t ii = L; ii-- > 0;) {
        const Shape in = ii == 0 ? Shape{cfg_.input_channels, cfg_.input_side, cfg_.input_side} : shapes_[ii - 1];
        const Shape& os = shapes_[ii];
        const std::vector<T>& x = tr.act[ii];
        const std::vector<T>& y = tr.act[ii + 1];
        const bool need_input = ii > 0;
        gin.assign(need_input ? x.size() : 0, T(0));
        std::visit(Overloaded{
                       [&](const ConvSpec& c) {
                           const int P = os.height * os.width;
                           const int R = in.channels * c.filter * c.filter;
                           auto& dW = grads[weight_index_[ii]];
                           auto& db = grads[weight_index_[ii] + 1];
                           for (int o = 0; o < os.channels; ++o) {
                               T acc = 0;
                               for (int p = 0; p < P; ++p) acc += g[static_cast<std::size_t>(o) * P + p];
                               db[o] += acc;
                           }
                           // dW += g * col^T, computed against the transposed columns so
                           // the inner loop runs over contiguous weights.
                           std::vector<T> colT(static_cast<std::size_t>(P) * R);
                           const auto& col = tr.aux[ii];
                           for (int r = 0; r < R; ++r)
                               for (int p = 0; p < P; ++p) colT[static_cast<std::size_t>(p) * R + r] = col[static_cast<std::size_t>(r) * P + p];
                           gemm_nn(os.channels, R, P, g.data(), colT.data(), dW.data());
                           if (need_input) {
                               std::vector<T> dcol(static_cast<std::size_t>(R) * P, T(0));
                               gemm_tn(R, P, os.channels, params_[weight_index_[ii]].data(), g.data(), dcol.data());
                               col2im(dcol.data(), in, c, os.height, os.width, gin.data());
                           }
                       },
                       [&](const ReluSpec&) {
                           if (!need_input) return;
                           for (std::size_t j = 0; j < gin.size(); ++j) gin[j] = x[j] > T(0) ? g[j] : T(0);
                       },
                       [&](const PoolSpec&) {
                           if (!need_input) return;
                           const auto& am = tr.argmax[ii];
                           for (std::size_t o = 0; o < g.size(); ++o) gin[am[o]] += g[o];
                       },
                       [&](const LrnSpec& l) {
                           if (!need_input) return;
                           const int P = in.height * in.width;
                           const auto& scale = tr.aux[ii];
                           const T coeff = static_cast<T>(2.0 * l.alpha * l.beta / l.n);
                           std::vector<T> ratio(g.size());
                           for (std::size_t j = 0; j < g.size(); ++j) ratio[j] = g[j] * y[j] / scale[j];
                           for (int c = 0; c < in.channels; ++c) {
                               const auto [lo, hi] = lrn_window(c, in.channels, l.n);
                               for (int p = 0; p < P; ++p) {
                                   T acc = 0;
                                   for (int q = lo; q <= hi; ++q) acc += ratio[static_cast<std::size_t>(q) * P + p];
                                   const std::size_t idx = static_cast<std::size_t>(c) * P + p;
                                   gin[idx] = g[idx] * static_cast<T>(std::pow(scale[idx], static_cast<T>(-l.beta))) -
                                              coeff * x[idx] * acc;
                               }
                           }
                       },
                       [&](const DropoutSpec&) {
                           if (!need_input) return;
                           const auto& mult = tr.aux[ii];
                           if (mult.empty()) gin = g;
                           else
                               for (std::size_t j = 0; j < g.size(); ++j) gin[j] = g[j] * mult[j];
                       },
                       [&](const FcSpec& f) {
                           const int n_in = static_cast<int>(x.size());
                           auto& dW = grads[weight_index_[ii]];
                           auto& db = grads[weight_index_[ii] + 1];
                           const auto& W = params_[weight_index_[ii]];
                           for (int o = 0; o < f.out_dim; ++o) {
                               const T go = g[o];
                               db[o] += go;
                               T* dw = dW.data() + static_cast<std::size_t>(o) * n_in;
                               for (int j = 0; j < n_in; ++j) dw[j] += go * x[j];
                               if (need_input) {
                                   const T* w = W.data() + static_cast<std::size_t>(o) * n_in;
                                   for (int j = 0; j < n_in; ++j) gin[j] += w[j] * go;
                               }
                           }
                       },
                   },
                   layers_[ii]);
        g.swap(gin);
    }
}

template <class T>
typename Network<T>::Output Network<T>::forward(std::span<const T> batch, int n, Mode mode,
                                                std::uint64_t dropout_seed) const {
    if (n < 0 || batch.size() != static_cast<std::size_t>(n) * input_size())
        throw Error("forward: batch size does not match the network input");
    Output out;
    out.logits.resize(static_cast<std::size_t>(n) * kClasses);
    out.features.resize(static_cast<std::size_t>(n) * feature_dim_);
    const int chunks = std::min(n, 4 * static_cast<int>(worker_count()));
    parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t ch) {
        Trace tr;
        for (int i = static_cast<int>(ch); i < n; i += chunks) {
            forward_item(batch.data() + static_cast<std::size_t>(i) * input_size(), mode, item_seed(dropout_seed, i), tr);
            std::copy(tr.act.back().begin(), tr.act.back().end(), out.logits.begin() + static_cast<std::ptrdiff_t>(i) * kClasses);
            const auto& f = tr.act[feature_layer_ + 1];
            std::copy(f.begin(), f.end(), out.features.begin() + static_cast<std::ptrdiff_t>(i) * feature_dim_);
        }
    });
    return out;
}

namespace {

template <class T>
double log_softmax_at(const T* z, int label) {
    const double a = z[0], b = z[1];
    const double m = std::max(a, b);
    return (label == 0 ? a : b) - (m + std::log(std::exp(a - m) + std::exp(b - m)));
}

} // namespace

template <class T>
double Network<T>::decay_term(double lambda) const {
    double s = 0.0;
    for (std::size_t p = 0; p < params_.size(); ++p) {
        if (!info_[p].is_weight) continue;
        for (const T v : params_[p]) s += static_cast<double>(v) * v;
    }
    return 0.5 * lambda * s;
}

template <class T>
typename Network<T>::LossGrad Network<T>::loss_and_grad(std::span<const T> batch, std::span<const int> labels,
                                                        double lambda, std::uint64_t dropout_seed) const {
    const int n = static_cast<int>(labels.size());
    if (n < 1) throw Error("loss_and_grad: empty batch");
    if (batch.size() != static_cast<std::size_t>(n) * input_size())
        throw Error("loss_and_grad: batch size does not match the network input");
    for (int y : labels)
        if (y != 0 && y != 1) throw Error("loss_and_grad: labels must be 0 or 1");

    const int chunks = std::min(n, kLossChunks);
    std::vector<std::vector<std::vector<T>>> chunk_grads(chunks);
    std::vector<double> chunk_loss(chunks, 0.0);
    parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t ch) {
        auto& grads = chunk_grads[ch];
        grads.resize(params_.size());
        for (std::size_t p = 0; p < params_.size(); ++p) grads[p].assign(params_[p].size(), T(0));
        Trace tr;
        for (int i = static_cast<int>(ch); i < n; i += chunks) {
            forward_item(batch.data() + static_cast<std::size_t>(i) * input_size(), Mode::Train,
                         item_seed(dropout_seed, i), tr);
            const T* z = tr.act.back().data();
            chunk_loss[ch] -= log_softmax_at(z, labels[i]);
            const double m = std::max<double>(z[0], z[1]);
            const double e0 = std::exp(z[0] - m), e1 = std::exp(z[1] - m);
            const double p1 = e1 / (e0 + e1);
            const T dl[2] = {static_cast<T>(((1.0 - p1) - (labels[i] == 0)) / n),
                             static_cast<T>((p1 - (labels[i] == 1)) / n)};
            backward_item(tr, dl, grads);
        }
    });

    LossGrad out;
    out.grads = std::move(chunk_grads[0]);
    for (int ch = 1; ch < chunks; ++ch)
        for (std::size_t p = 0; p < params_.size(); ++p)
            for (std::size_t j = 0; j < params_[p].size(); ++j) out.grads[p][j] += chunk_grads[ch][p][j];
    for (double l : chunk_loss) out.data_loss += l;
    out.data_loss /= n;
    out.decay_loss = decay_term(lambda);
    out.loss = out.data_loss + out.decay_loss;
    for (std::size_t p = 0; p < params_.size(); ++p) {
        if (!info_[p].is_weight) continue;
        for (std::size_t j = 0; j < params_[p].size(); ++j) out.grads[p][j] += static_cast<T>(lambda) * params_[p][j];
    }
    return out;
}

template <class T>
double Network<T>::loss(std::span<const T> batch, std::span<const int> labels, double lambda, Mode mode,
                        std::uint64_t dropout_seed) const {
    const int n = static_cast<int>(labels.size());
    if (n < 1) throw Error("loss: empty batch");
    const Output o = forward(batch, n, mode, dropout_seed);
    double s = 0.0;
    for (int i = 0; i < n; ++i) s -= log_softmax_at(o.logits.data() + static_cast<std::size_t>(i) * kClasses, labels[i]);
    return s / n + decay_term(lambda);
}

template class Network<float>;
template class Network<double>;

// ---------------------------------------------------------------------------
// Optimisation

template <class T>
void sgd_step(std::vector<std::vector<T>>& params, const std::vector<std::vector<T>>& grads, SgdState<T>& state,
              double learning_rate, double momentum) {
    if (grads.size() != params.size()) throw Error("sgd_step: gradient count mismatch");
    if (state.velocity.empty()) {
        state.velocity.resize(params.size());
        for (std::size_t p = 0; p < params.size(); ++p) state.velocity[p].assign(params[p].size(), T(0));
    }
    const T mu = static_cast<T>(momentum), lr = static_cast<T>(learning_rate);
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (grads[p].size() != params[p].size() || state.velocity[p].size() != params[p].size())
            throw Error("sgd_step: tensor shape mismatch");
        for (std::size_t j = 0; j < params[p].size(); ++j) {
            T& v = state.velocity[p][j];
            v = mu * v - lr * grads[p][j];
            params[p][j] += v;
        }
    }
}

template void sgd_step<float>(std::vector<std::vector<float>>&, const std::vector<std::vector<float>>&,
                              SgdState<float>&, double, double);
template void sgd_step<double>(std::vector<std::vector<double>>&, const std::vector<std::vector<double>>&,
                               SgdState<double>&, double, double);

PlateauSchedule::PlateauSchedule(double lr, double decay, int patience, double eps)
    : lr_(lr), decay_(decay), patience_(patience), eps_(eps), best_(0.0) {}

double PlateauSchedule::observe(double loss) {
    if (first_ || loss < best_ - eps_) {
        best_ = first_ ? loss : std::min(best_, loss);
        first_ = false;
        stale_ = 0;
        return lr_;
    }
    best_ = std::min(best_, loss);
    if (++stale_ >= patience_) {
        lr_ *= decay_;
        stale_ = 0;
    }
    return lr_;
}

namespace {

double dataset_loss(const Network<float>& net, const TrainingData& data, int batch, double lambda) {
    const int in = net.input_size();
    double total = 0.0;
    std::vector<float> inputs;
    for (std::size_t start = 0; start < data.count; start += batch) {
        const std::size_t n = std::min<std::size_t>(batch, data.count - start);
        inputs.assign(n * in, 0.0f);
        parallel_for(n, [&](std::size_t i) {
            data.fill(start + i, std::span<float>(inputs.data() + i * in, in));
        });
        const auto out = net.forward(inputs, static_cast<int>(n), Mode::Eval);
        for (std::size_t i = 0; i < n; ++i) total -= log_softmax_at(out.logits.data() + 2 * i, data.labels[start + i]);
    }
    return total / static_cast<double>(data.count) + net.decay_term(lambda);
}

} // namespace

std::vector<EpochLog> train_network(Network<float>& net, const TrainConfig& tc, const TrainingData& train,
                                    const TrainingData* validation,
                                    const std::function<void(const EpochLog&)>& on_epoch) {
    if (tc.batch < 1 || tc.epochs < 1 || tc.learning_rate <= 0.0) throw Error("invalid training configuration");
    if (train.count == 0 || train.labels.size() != train.count) throw Error("training set is empty or unlabeled");
    const int in = net.input_size();
    std::vector<std::size_t> order(train.count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(tc.seed);
    SgdState<float> state;
    PlateauSchedule schedule(tc.learning_rate, tc.lr_decay, tc.patience, tc.plateau_eps);
    std::vector<EpochLog> log;
    std::vector<float> inputs;
    std::vector<int> labels;
    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        const double lr = schedule.learning_rate();
        double sum = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < train.count; start += tc.batch, ++batch_index) {
            const std::size_t n = std::min<std::size_t>(tc.batch, train.count - start);
            inputs.assign(n * in, 0.0f);
            labels.resize(n);
            parallel_for(n, [&](std::size_t i) {
                train.fill(order[start + i], std::span<float>(inputs.data() + i * in, in));
            });
            for (std::size_t i = 0; i < n; ++i) labels[i] = train.labels[order[start + i]];
            const std::uint64_t seed = splitmix64(tc.seed ^ splitmix64((static_cast<std::uint64_t>(epoch) << 32) | batch_index));
            auto lg = net.loss_and_grad(inputs, labels, tc.weight_decay, seed);
            sgd_step(net.params(), lg.grads, state, lr, tc.momentum);
            sum += lg.loss * static_cast<double>(n);
        }
        EpochLog e;
        e.epoch = epoch;
        e.learning_rate = lr;
        e.train_loss = sum / static_cast<double>(train.count);
        e.val_loss = validation && validation->count > 0 ? dataset_loss(net, *validation, tc.batch, tc.weight_decay)
                                                          : e.train_loss;
        schedule.observe(e.val_loss);
        log.push_back(e);
        if (on_epoch) on_epoch(e);
    }
    return log;
}

// ---------------------------------------------------------------------------
// Model, inference and export

void CnnModel::prepare_input(const Image& patch, std::span<float> out) const {
    const int side = net.config().input_side;
    if (patch.width() != side || patch.height() != side) throw Error("patch side does not match the network input");
    if (out.size() != static_cast<std::size_t>(net.input_size()) || mean.size() != out.size())
        throw Error("input buffer size mismatch");
    const auto& data = patch.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(data[i]) - mean[i];
}

std::vector<float> extract_fc7(const CnnModel& model, std::span<const float> inputs, int n) {
    return model.net.forward(inputs, n, Mode::Eval).features;
}

std::vector<float> positive_probability(const CnnModel& model, std::span<const float> inputs, int n) {
    const auto out = model.net.forward(inputs, n, Mode::Eval);
    std::vector<float> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p[i] = static_cast<float>(std::exp(log_softmax_at(out.logits.data() + 2 * i, 1)));
    return p;
}

std::vector<float> classifier_probability(const Network<float>& net, std::span<const float> features, int n) {
    const int d = net.feature_dim();
    if (features.size() != static_cast<std::size_t>(n) * d) throw Error("classifier_probability: feature size mismatch");
    const auto& W = net.params()[net.params().size() - 2];
    const auto& b = net.params().back();
    std::vector<float> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float* f = features.data() + static_cast<std::size_t>(i) * d;
        float z[2];
        for (int o = 0; o < 2; ++o) {
            float acc = 0.0f;
            for (int j = 0; j < d; ++j) acc += W[static_cast<std::size_t>(o) * d + j] * f[j];
            z[o] = acc + b[o];
        }
        p[i] = static_cast<float>(std::exp(log_softmax_at(z, 1)));
    }
    return p;
}

namespace {

constexpr std::uint16_t kModelVersion = 1;

void write_config(BinaryWriter& w, const NetConfig& cfg) {
    w.str(cfg.name);
    w.u32(static_cast<std::uint32_t>(cfg.input_side));
    w.u32(static_cast<std::uint32_t>(cfg.input_channels));
    w.f64(cfg.init_std);
    w.u32(static_cast<std::uint32_t>(cfg.layers.size()));
    for (const auto& l : cfg.layers) {
        w.u8(static_cast<std::uint8_t>(l.index()));
        std::visit(Overloaded{
                       [&](const ConvSpec& c) {
                           w.u32(c.out_channels);
                           w.u32(c.filter);
                           w.u32(c.stride);
                           w.u32(c.padding);
                       },
                       [&](const ReluSpec&) {},
                       [&](const PoolSpec& p) {
                           w.u32(p.size);
                           w.u32(p.stride);
                       },
                       [&](const LrnSpec& n) {
                           w.u32(n.n);
                           w.f64(n.k);
                           w.f64(n.alpha);
                           w.f64(n.beta);
                       },
                       [&](const DropoutSpec& d) { w.f64(d.rate); },
                       [&](const FcSpec& f) { w.u32(f.out_dim); },
                   },
                   l);
    }
}

NetConfig read_config(BinaryReader& r) {
    NetConfig cfg;
    cfg.name = r.str();
    cfg.input_side = static_cast<int>(r.u32());
    cfg.input_channels = static_cast<int>(r.u32());
    cfg.init_std = r.f64();
    const std::uint32_t n = r.u32();
    if (n > 1000) throw FormatError("model file: implausible layer count");
    for (std::uint32_t i = 0; i < n; ++i) {
        const int tag = r.u8();
        switch (tag) {
        case 0: {
            ConvSpec c;
            c.out_channels = static_cast<int>(r.u32());
            c.filter = static_cast<int>(r.u32());
            c.stride = static_cast<int>(r.u32());
            c.padding = static_cast<int>(r.u32());
            cfg.layers.push_back(c);
            break;
        }
        case 1: cfg.layers.push_back(ReluSpec{}); break;
        case 2: {
            PoolSpec p;
            p.size = static_cast<int>(r.u32());
            p.stride = static_cast<int>(r.u32());
            cfg.layers.push_back(p);
            break;
        }
        case 3: {
            LrnSpec l;
            l.n = static_cast<int>(r.u32());
            l.k = r.f64();
            l.alpha = r.f64();
            l.beta = r.f64();
            cfg.layers.push_back(l);
            break;
        }
        case 4: cfg.layers.push_back(DropoutSpec{r.f64()}); break;
        case 5: cfg.layers.push_back(FcSpec{static_cast<int>(r.u32())}); break;
        default: throw FormatError("model file: unknown layer tag " + std::to_string(tag));
        }
    }
    return cfg;
}

} // namespace

void save_model(const std::filesystem::path& path, const CnnModel& model) {
    BinaryWriter w;
    w.magic("LCNNMODL");
    w.u16(kModelVersion);
    write_config(w, model.net.config());
    const auto& params = model.net.params();
    const auto& info = model.net.param_info();
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (std::size_t p = 0; p < params.size(); ++p) {
        w.u32(static_cast<std::uint32_t>(info[p].dims.size()));
        for (int d : info[p].dims) w.u32(static_cast<std::uint32_t>(d));
        w.f32_array(params[p]);
    }
    w.f32_array(model.mean);
    write_file_atomic(path, w.bytes());
}

CnnModel load_model(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    BinaryReader r(bytes, path.string());
    r.expect_magic("LCNNMODL");
    const auto version = r.u16();
    if (version != kModelVersion) throw FormatError(path.string() + ": unsupported model version " + std::to_string(version));
    CnnModel m;
    m.net = Network<float>(read_config(r), 0);
    auto& params = m.net.params();
    const auto& info = m.net.param_info();
    if (r.u32() != params.size()) throw FormatError(path.string() + ": parameter count does not match the config");
    for (std::size_t p = 0; p < params.size(); ++p) {
        const std::uint32_t nd = r.u32();
        if (nd != info[p].dims.size()) throw FormatError(path.string() + ": tensor rank mismatch");
        for (std::uint32_t d = 0; d < nd; ++d)
            if (static_cast<int>(r.u32()) != info[p].dims[d]) throw FormatError(path.string() + ": tensor shape mismatch");
        params[p] = r.f32_array(params[p].size());
    }
    m.mean = r.f32_array(static_cast<std::size_t>(m.net.input_size()));
    if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes");
    return m;
}

FilterGrid export_first_layer_filters(const Network<float>& net) {
    const auto& cfg = net.config();
    const auto* conv = cfg.layers.empty() ? nullptr : std::get_if<ConvSpec>(&cfg.layers.front());
    if (!conv || cfg.input_channels != 3) throw Error("first layer is not an RGB convolution");
    const int n = conv->out_channels, k = conv->filter;
    FilterGrid g;
    g.tile = k;
    g.columns = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    g.rows = g.columns;
    const int side = g.columns * (k + 1) + 1;
    g.image = Image(side, side, ColorSpace::RGB);
    for (int c = 0; c < 3; ++c) std::fill(g.image.plane(c).begin(), g.image.plane(c).end(), 1.0);
    const auto& W = net.params()[0];
    const std::size_t per = static_cast<std::size_t>(3) * k * k;
    for (int f = 0; f < n; ++f) {
        const float* w = W.data() + f * per;
        const auto [lo, hi] = std::minmax_element(w, w + per);
        const double range = static_cast<double>(*hi) - *lo;
        const int ox = 1 + (f % g.columns) * (k + 1), oy = 1 + (f / g.columns) * (k + 1);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < k; ++y)
                for (int x = 0; x < k; ++x) {
                    const float v = w[(static_cast<std::size_t>(c) * k + y) * k + x];
                    g.image.at(c, ox + x, oy + y) = range > 0.0 ? (static_cast<double>(v) - *lo) / range : 0.5;
                }
    }
    return g;
}

GradCheckResult gradient_check(Network<double>& net, std::span<const double> batch, std::span<const int> labels,
                               double lambda, double eps, int per_tensor, std::uint64_t seed) {
    const auto analytic = net.loss_and_grad(batch, labels, lambda, seed);
    std::mt19937_64 rng(seed);
    GradCheckResult res;
    auto& params = net.params();
    for (std::size_t p = 0; p < params.size(); ++p) {
        std::vector<std::size_t> idx(params[p].size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        if (per_tensor > 0 && idx.size() > static_cast<std::size_t>(per_tensor)) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(static_cast<std::size_t>(per_tensor));
        }
        for (std::size_t j : idx) {
            const double orig = params[p][j];
            params[p][j] = orig + eps;
            const double lp = net.loss(batch, labels, lambda, Mode::Train, seed);
            params[p][j] = orig - eps;
            const double lm = net.loss(batch, labels, lambda, Mode::Train, seed);
            params[p][j] = orig;
            const double num = (lp - lm) / (2.0 * eps);
            const double a = analytic.grads[p][j];
            const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6});
            res.max_relative_error = std::max(res.max_relative_error, err);
            ++res.checked;
        }
    }
    return res;
}

} // namespace lcnn
