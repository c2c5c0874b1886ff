#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lcnn/imaging.hpp"
#include "lcnn/saliency.hpp"

namespace lcnn {

inline constexpr double kBetaSquared = 0.3;
inline constexpr int kSweepThresholds = 256;

struct PrecisionRecall {
    double precision = 1.0;
    double recall = 0.0;
};

/// Binarises at s > t. An empty prediction has precision 1 and recall 0.
PrecisionRecall precision_recall(const SaliencyMap& map, const RegionMask& gt, double t);

/// (1 + b2) P R / (b2 P + R), 0 when P = R = 0.
double f_beta(double precision, double recall, double beta2 = kBetaSquared);

/// min(2 * mean saliency, 1).
double adaptive_threshold(const SaliencyMap& map);

double f_measure(const SaliencyMap& map, const RegionMask& gt, double beta2 = kBetaSquared);

double mae(const SaliencyMap& map, const RegionMask& gt);
double mae(const SaliencyMap& a, const SaliencyMap& b);

struct PrCurve {
    std::vector<double> thresholds;
    std::vector<double> precision;
    std::vector<double> recall;
};

struct ImageMetrics {
    std::string id;
    double f_measure = 0.0;
    double mae = 0.0;
};

struct EvalReport {
    double f_measure = 0.0;
    double mae = 0.0;
    PrCurve pr;
    std::vector<ImageMetrics> rows;
};

/// Mean adaptive-threshold F, mean MAE and the mean 256-threshold PR sweep.
EvalReport evaluate_dataset(std::span<const SaliencyMap> maps, std::span<const RegionMask> gts,
                            std::span<const std::string> ids = {});

void write_pr_csv(const std::filesystem::path& path, const PrCurve& pr);
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);

} // namespace lcnn
