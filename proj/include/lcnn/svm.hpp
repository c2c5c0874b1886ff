#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace lcnn {

/// Dense row-major feature matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
    std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

inline constexpr double kStdFloor = 1e-8;

struct Standardizer {
    std::vector<double> mean;
    std::vector<double> stddev;

    void apply(std::span<double> x) const;
    Matrix apply(const Matrix& X) const;
};

/// Column means and population standard deviations, floored at kStdFloor.
Standardizer standardize_fit(const Matrix& X);

struct SvmModel {
    std::vector<double> w;
    double b = 0.0;
    double C = 0.001;
};

struct SvmParams {
    double C = 0.001;
    /// Subgradient steps; 0 derives the count from `epochs`.
    int iterations = 0;
    int epochs = 20;
    int batch = 64;
    std::uint64_t seed = 1;
};

/// Mini-batch stochastic subgradient descent on
/// 1/2 |w|^2 + C sum max(0, 1 - y (w.x + b)) with step 1/(lambda t),
/// lambda = 1/(C N). Iterates of the second half are averaged and the
/// bias is then set to the midpoint of its exact optimal interval.
/// Labels are +1 / -1; both classes must be present.
SvmModel svm_train(const Matrix& X, std::span<const int> y, const SvmParams& params);

double svm_score(const SvmModel& model, std::span<const double> x);

double hinge_objective(const SvmModel& model, const Matrix& X, std::span<const int> y, double C);

/// Bias minimising the summed hinge loss for fixed w (midpoint of the
/// optimal interval).
double optimal_bias(std::span<const double> margins_without_bias, std::span<const int> y);

/// Trained detector as stored on disk; `layout` names the feature
/// concatenation the model was trained on.
struct SvmFile {
    SvmModel model;
    Standardizer standardizer;
    std::string layout;
};

void save_svm(const std::filesystem::path& path, const SvmFile& file);
SvmFile load_svm(const std::filesystem::path& path);

} // namespace lcnn
