#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "lcnn/error.hpp"
#include "lcnn/svm.hpp"
#include "test_util.hpp"

using namespace lcnn;

namespace {

struct Fixture {
    Matrix X;
    std::vector<int> y;
};

Fixture blobs(int n, double spread, unsigned seed, int dims = 2) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> N(0.0, spread);
    Fixture f{Matrix(n, dims), std::vector<int>(n)};
    for (int i = 0; i < n; ++i) {
        f.y[i] = i % 2 ? 1 : -1;
        f.X.at(i, 0) = 2.0 * f.y[i] + N(rng);
        for (int d = 1; d < dims; ++d) f.X.at(i, d) = N(rng);
    }
    return f;
}

double accuracy(const SvmModel& m, const Fixture& f) {
    int ok = 0;
    for (std::size_t i = 0; i < f.X.rows; ++i) ok += (svm_score(m, f.X.row(i)) > 0.0) == (f.y[i] > 0);
    return static_cast<double>(ok) / static_cast<double>(f.X.rows);
}

std::vector<std::size_t> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    return order;
}

} // namespace

TEST(Svm, ConstantColumnStandardizesToZero) {
    Matrix X(4, 2);
    for (std::size_t i = 0; i < 4; ++i) {
        X.at(i, 0) = 3.5;
        X.at(i, 1) = static_cast<double>(i);
    }
    const Standardizer s = standardize_fit(X);
    EXPECT_DOUBLE_EQ(s.stddev[0], kStdFloor);
    const Matrix Z = s.apply(X);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(Z.at(i, 0), 0.0);
}

TEST(Svm, StandardizedColumnsHaveZeroMeanUnitVariance) {
    const Fixture f = blobs(101, 1.3, 2, 5);
    const Standardizer s = standardize_fit(f.X);
    const Matrix Z = s.apply(f.X);
    for (std::size_t j = 0; j < Z.cols; ++j) {
        double m = 0.0, v = 0.0;
        for (std::size_t i = 0; i < Z.rows; ++i) m += Z.at(i, j);
        m /= static_cast<double>(Z.rows);
        for (std::size_t i = 0; i < Z.rows; ++i) v += (Z.at(i, j) - m) * (Z.at(i, j) - m);
        EXPECT_LE(std::abs(m), 1e-9);
        EXPECT_NEAR(v / static_cast<double>(Z.rows), 1.0, 1e-9);
    }
}

TEST(Svm, TwoPointColumn) {
    Matrix X(2, 1);
    X.at(1, 0) = 2.0;
    const Standardizer s = standardize_fit(X);
    EXPECT_DOUBLE_EQ(s.mean[0], 1.0);
    EXPECT_DOUBLE_EQ(s.stddev[0], 1.0);
    const Matrix Z = s.apply(X);
    EXPECT_DOUBLE_EQ(Z.at(0, 0), -1.0);
    EXPECT_DOUBLE_EQ(Z.at(1, 0), 1.0);
    EXPECT_THROW(standardize_fit(Matrix()), Error);
}

TEST(Svm, ObjectiveAtOriginIsCN) {
    const Fixture f = blobs(37, 1.0, 3);
    const SvmModel zero{std::vector<double>(2, 0.0), 0.0, 0.001};
    EXPECT_EQ(hinge_objective(zero, f.X, f.y, 0.001), 0.001 * 37);
}

TEST(Svm, ObjectiveByHand) {
    Matrix X(1, 2);
    X.at(0, 0) = 0.5;
    const SvmModel m{{1.0, 0.0}, 0.0, 1.0};
    EXPECT_DOUBLE_EQ(hinge_objective(m, X, std::vector<int>{1}, 1.0), 1.0);
    X.at(0, 0) = 3.0;
    EXPECT_DOUBLE_EQ(hinge_objective(m, X, std::vector<int>{1}, 1.0), 0.5);
}

TEST(Svm, SeparableBlobsAreLearned) {
    const Fixture train = blobs(200, 0.4, 4);
    const Fixture held = blobs(500, 0.4, 5);
    SvmParams p;
    p.C = 1.0;
    p.iterations = 2000;
    const SvmModel m = svm_train(train.X, train.y, p);
    EXPECT_EQ(accuracy(m, train), 1.0);
    EXPECT_GE(accuracy(m, held), 0.99);
    EXPECT_LE(hinge_objective(m, train.X, train.y, p.C), p.C * 200);
}

TEST(Svm, DefaultPenaltyStillBeatsOrigin) {
    const Fixture f = blobs(300, 1.0, 6, 4);
    const SvmModel m = svm_train(f.X, f.y, SvmParams{});
    EXPECT_LE(hinge_objective(m, f.X, f.y, 0.001), 0.001 * 300);
    for (double w : m.w) EXPECT_TRUE(std::isfinite(w));
}

TEST(Svm, CloseToBestOfRestarts) {
    const Fixture f = blobs(400, 1.2, 7, 3);
    SvmParams p;
    p.C = 0.05;
    p.epochs = 40;
    std::vector<double> objectives;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        p.seed = seed;
        objectives.push_back(hinge_objective(svm_train(f.X, f.y, p), f.X, f.y, p.C));
    }
    const double best = *std::min_element(objectives.begin(), objectives.end());
    p.seed = 1;
    EXPECT_LE(hinge_objective(svm_train(f.X, f.y, p), f.X, f.y, p.C), 1.01 * best);
}

TEST(Svm, LargerPenaltyMeansFewerViolations) {
    const Fixture f = blobs(300, 1.5, 8, 2);
    auto violations = [&](double C) {
        SvmParams p;
        p.C = C;
        p.epochs = 60;
        const SvmModel m = svm_train(f.X, f.y, p);
        int v = 0;
        for (std::size_t i = 0; i < f.X.rows; ++i) v += f.y[i] * svm_score(m, f.X.row(i)) < 1.0;
        return v;
    };
    const int low = violations(0.001), high = violations(1.0);
    EXPECT_LE(high, low);
    EXPECT_LT(high, 300);
}

TEST(Svm, ScoreIsAffine) {
    const SvmModel zero{{0.0, 0.0}, 0.7, 1.0};
    EXPECT_EQ(svm_score(zero, std::vector<double>{3.0, -9.0}), 0.7);
    const SvmModel m{{1.5, -0.5}, 0.2, 1.0};
    const std::vector<double> a = {1.0, 2.0}, b = {-3.0, 0.5};
    for (double t : {0.0, 0.25, 0.9}) {
        const std::vector<double> mix = {t * a[0] + (1 - t) * b[0], t * a[1] + (1 - t) * b[1]};
        EXPECT_NEAR(svm_score(m, mix), t * svm_score(m, a) + (1 - t) * svm_score(m, b), 1e-12);
    }
    EXPECT_THROW(svm_score(m, std::vector<double>{1.0}), Error);
}

TEST(Svm, SingleClassIsRejected) {
    Matrix X(3, 1);
    EXPECT_THROW(svm_train(X, std::vector<int>{1, 1, 1}, SvmParams{}), Error);
    EXPECT_THROW(svm_train(X, std::vector<int>{1, 0, -1}, SvmParams{}), Error);
}

TEST(Svm, OptimalBiasMatchesGridSearch) {
    std::mt19937 rng(9);
    std::normal_distribution<double> N(0.0, 1.0);
    for (int t = 0; t < 20; ++t) {
        const int n = 5 + t;
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (int i = 0; i < n; ++i) {
            y[i] = i % 3 == 0 ? 1 : -1;
            s[i] = N(rng) + 0.5 * y[i];
        }
        auto hinge = [&](double b) {
            double h = 0.0;
            for (int i = 0; i < n; ++i) h += std::max(0.0, 1.0 - y[i] * (s[i] + b));
            return h;
        };
        double best = 1e300;
        for (int k = -4000; k <= 4000; ++k) best = std::min(best, hinge(k * 1e-3));
        EXPECT_LE(hinge(optimal_bias(s, y)), best + 1e-9);
    }
}

TEST(Svm, RankingSurvivesAffineRescaling) {
    const Fixture train = blobs(200, 1.0, 10, 4);
    const Fixture test = blobs(50, 1.0, 11, 4);
    const std::vector<double> scale = {3.0, 0.01, 250.0, 7.5}, shift = {-4.0, 100.0, 0.5, -1e3};
    auto transformed = [&](const Matrix& X) {
        Matrix Y = X;
        for (std::size_t i = 0; i < Y.rows; ++i)
            for (std::size_t j = 0; j < Y.cols; ++j) Y.at(i, j) = scale[j] * X.at(i, j) + shift[j];
        return Y;
    };
    auto scores = [&](const Matrix& Xtr, const Matrix& Xte) {
        const Standardizer s = standardize_fit(Xtr);
        const SvmModel m = svm_train(s.apply(Xtr), train.y, SvmParams{});
        const Matrix Z = s.apply(Xte);
        std::vector<double> out;
        for (std::size_t i = 0; i < Z.rows; ++i) out.push_back(svm_score(m, Z.row(i)));
        return out;
    };
    EXPECT_EQ(ranks(scores(train.X, test.X)), ranks(scores(transformed(train.X), transformed(test.X))));
}

TEST(Svm, SeededTrainingIsReproducible) {
    const Fixture f = blobs(150, 1.0, 12, 3);
    const SvmModel a = svm_train(f.X, f.y, SvmParams{});
    const SvmModel b = svm_train(f.X, f.y, SvmParams{});
    EXPECT_EQ(a.w, b.w);
    EXPECT_EQ(a.b, b.b);
}

TEST(Svm, FileRoundTrip) {
    test::TempDir dir;
    const Fixture f = blobs(60, 1.0, 13, 3);
    SvmFile file{svm_train(f.X, f.y, SvmParams{}), standardize_fit(f.X), "lowlevel[0:104]+fc7[64]"};
    save_svm(dir / "d.svm", file);
    const SvmFile back = load_svm(dir / "d.svm");
    EXPECT_EQ(back.model.w, file.model.w);
    EXPECT_EQ(back.model.b, file.model.b);
    EXPECT_EQ(back.model.C, file.model.C);
    EXPECT_EQ(back.standardizer.mean, file.standardizer.mean);
    EXPECT_EQ(back.standardizer.stddev, file.standardizer.stddev);
    EXPECT_EQ(back.layout, file.layout);
}
