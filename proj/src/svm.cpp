#include "lcnn/svm.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lcnn/binary_io.hpp"
#include "lcnn/error.hpp"

namespace lcnn {

void Standardizer::apply(std::span<double> x) const {
    if (x.size() != mean.size()) throw Error("standardizer dimension mismatch");
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = (x[j] - mean[j]) / stddev[j];
}

Matrix Standardizer::apply(const Matrix& X) const {
    Matrix out = X;
    for (std::size_t i = 0; i < out.rows; ++i) apply(out.row(i));
    return out;
}

Standardizer standardize_fit(const Matrix& X) {
    if (X.rows == 0 || X.cols == 0) throw Error("standardize_fit: empty matrix");
    Standardizer s;
    s.mean.assign(X.cols, 0.0);
    s.stddev.assign(X.cols, 0.0);
    for (std::size_t j = 0; j < X.cols; ++j) {
        double sum = 0.0;
        for (std::size_t i = 0; i < X.rows; ++i) sum += X.at(i, j);
        const double m = sum / static_cast<double>(X.rows);
        double ss = 0.0;
        for (std::size_t i = 0; i < X.rows; ++i) {
            const double d = X.at(i, j) - m;
            ss += d * d;
        }
        s.mean[j] = m;
        s.stddev[j] = std::max(kStdFloor, std::sqrt(ss / static_cast<double>(X.rows)));
    }
    return s;
}

double svm_score(const SvmModel& model, std::span<const double> x) {
    if (x.size() != model.w.size()) throw Error("svm_score: feature dimension mismatch");
    double s = model.b;
    for (std::size_t j = 0; j < x.size(); ++j) s += model.w[j] * x[j];
    return s;
}

double hinge_objective(const SvmModel& model, const Matrix& X, std::span<const int> y, double C) {
    if (X.rows != y.size()) throw Error("hinge_objective: label count mismatch");
    double reg = 0.0;
    for (double v : model.w) reg += v * v;
    double hinge = 0.0;
    for (std::size_t i = 0; i < X.rows; ++i) hinge += std::max(0.0, 1.0 - y[i] * svm_score(model, X.row(i)));
    return 0.5 * reg + C * hinge;
}

double optimal_bias(std::span<const double> margins_without_bias, std::span<const int> y) {
    // Every breakpoint raises the slope of the summed hinge by one, starting
    // from -(#positives); the flat stretch lies between breakpoints P-1 and P.
    std::vector<double> bp(y.size());
    std::size_t positives = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        bp[i] = y[i] > 0 ? 1.0 - margins_without_bias[i] : -1.0 - margins_without_bias[i];
        positives += y[i] > 0;
    }
    if (positives == 0 || positives == y.size()) throw Error("optimal_bias: both classes are required");
    std::sort(bp.begin(), bp.end());
    return 0.5 * (bp[positives - 1] + bp[positives]);
}

SvmModel svm_train(const Matrix& X, std::span<const int> y, const SvmParams& params) {
    if (X.rows == 0 || X.rows != y.size()) throw Error("svm_train: empty training set or label count mismatch");
    if (params.C <= 0.0 || params.batch < 1) throw Error("svm_train: C and batch must be positive");
    bool pos = false, neg = false;
    for (int v : y) {
        if (v != 1 && v != -1) throw Error("svm_train: labels must be +1 or -1");
        (v > 0 ? pos : neg) = true;
    }
    if (!pos || !neg) throw Error("svm_train: training set contains a single class");

    const std::size_t n = X.rows, d = X.cols;
    const double lambda = 1.0 / (params.C * static_cast<double>(n));
    const int k = static_cast<int>(std::min<std::size_t>(params.batch, n));
    const long iterations = params.iterations > 0
                                ? params.iterations
                                : std::max<long>(1, static_cast<long>(params.epochs) * static_cast<long>((n + k - 1) / k));
    std::mt19937_64 rng(params.seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);

    std::vector<double> w(d, 0.0), avg_w(d, 0.0), step(d);
    double b = 0.0, avg_b = 0.0;
    long averaged = 0;
    const double radius = 1.0 / std::sqrt(lambda);
    for (long t = 1; t <= iterations; ++t) {
        const double eta = 1.0 / (lambda * static_cast<double>(t));
        std::fill(step.begin(), step.end(), 0.0);
        double step_b = 0.0;
        for (int s = 0; s < k; ++s) {
            const std::size_t i = pick(rng);
            const auto x = X.row(i);
            double m = b;
            for (std::size_t j = 0; j < d; ++j) m += w[j] * x[j];
            if (y[i] * m < 1.0) {
                for (std::size_t j = 0; j < d; ++j) step[j] += y[i] * x[j];
                step_b += y[i];
            }
        }
        const double shrink = 1.0 - eta * lambda;
        double norm2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            w[j] = shrink * w[j] + eta / k * step[j];
            norm2 += w[j] * w[j];
        }
        b += eta / k * step_b;
        // Pegasos projection onto the ball holding the optimum.
        if (norm2 > radius * radius) {
            const double f = radius / std::sqrt(norm2);
            for (auto& v : w) v *= f;
        }
        if (2 * t > iterations) {
            for (std::size_t j = 0; j < d; ++j) avg_w[j] += w[j];
            avg_b += b;
            ++averaged;
        }
    }
    SvmModel model;
    model.C = params.C;
    model.w.resize(d);
    for (std::size_t j = 0; j < d; ++j) model.w[j] = avg_w[j] / static_cast<double>(averaged);
    std::vector<double> margins(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto x = X.row(i);
        double m = 0.0;
        for (std::size_t j = 0; j < d; ++j) m += model.w[j] * x[j];
        margins[i] = m;
    }
    model.b = optimal_bias(margins, y);
    return model;
}

namespace {
constexpr std::uint16_t kSvmVersion = 1;
}

void save_svm(const std::filesystem::path& path, const SvmFile& file) {
    const std::size_t d = file.model.w.size();
    if (file.standardizer.mean.size() != d || file.standardizer.stddev.size() != d)
        throw Error("save_svm: standardizer dimension mismatch");
    BinaryWriter w;
    w.magic("LCNNSVM0");
    w.u16(kSvmVersion);
    w.str(file.layout);
    w.u32(static_cast<std::uint32_t>(d));
    w.f64(file.model.C);
    for (double v : file.model.w) w.f64(v);
    w.f64(file.model.b);
    for (double v : file.standardizer.mean) w.f64(v);
    for (double v : file.standardizer.stddev) w.f64(v);
    write_file_atomic(path, w.bytes());
}

SvmFile load_svm(const std::filesystem::path& path) {
    BinaryReader r(read_file(path), path.string());
    r.expect_magic("LCNNSVM0");
    const auto version = r.u16();
    if (version != kSvmVersion) throw FormatError(path.string() + ": unsupported SVM version " + std::to_string(version));
    SvmFile f;
    f.layout = r.str();
    const std::size_t d = r.u32();
    f.model.C = r.f64();
    f.model.w.resize(d);
    for (auto& v : f.model.w) v = r.f64();
    f.model.b = r.f64();
    f.standardizer.mean.resize(d);
    f.standardizer.stddev.resize(d);
    for (auto& v : f.standardizer.mean) v = r.f64();
    for (auto& v : f.standardizer.stddev) v = r.f64();
    if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes");
    return f;
}

} // namespace lcnn
