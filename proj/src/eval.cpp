#include "lcnn/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "lcnn/binary_io.hpp"
#include "lcnn/error.hpp"
#include "lcnn/parallel.hpp"

namespace lcnn {

namespace {

void check_dims(const SaliencyMap& map, const RegionMask& gt) {
    if (map.width != gt.width() || map.height != gt.height()) throw Error("saliency map and ground truth differ in size");
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

} // namespace

PrecisionRecall precision_recall(const SaliencyMap& map, const RegionMask& gt, double t) {
    check_dims(map, gt);
    if (gt.area() < 1) throw Error("precision_recall: ground truth is empty");
    const auto dense = gt.dense();
    long tp = 0, predicted = 0;
    for (std::size_t i = 0; i < map.values.size(); ++i) {
        if (map.values[i] > t) {
            ++predicted;
            tp += dense[i];
        }
    }
    PrecisionRecall pr;
    if (predicted > 0) pr.precision = static_cast<double>(tp) / predicted;
    pr.recall = static_cast<double>(tp) / gt.area();
    return pr;
}

double f_beta(double precision, double recall, double beta2) {
    const double denom = beta2 * precision + recall;
    return denom > 0.0 ? (1.0 + beta2) * precision * recall / denom : 0.0;
}

double adaptive_threshold(const SaliencyMap& map) {
    if (map.values.empty()) return 0.0;
    double s = 0.0;
    for (double v : map.values) s += v;
    return std::min(2.0 * s / static_cast<double>(map.values.size()), 1.0);
}

double f_measure(const SaliencyMap& map, const RegionMask& gt, double beta2) {
    const PrecisionRecall pr = precision_recall(map, gt, adaptive_threshold(map));
    return f_beta(pr.precision, pr.recall, beta2);
}

double mae(const SaliencyMap& map, const RegionMask& gt) {
    check_dims(map, gt);
    const auto dense = gt.dense();
    double s = 0.0;
    for (std::size_t i = 0; i < map.values.size(); ++i) s += std::abs(map.values[i] - dense[i]);
    return map.values.empty() ? 0.0 : s / static_cast<double>(map.values.size());
}

double mae(const SaliencyMap& a, const SaliencyMap& b) {
    if (a.width != b.width || a.height != b.height) throw Error("mae: map sizes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) s += std::abs(a.values[i] - b.values[i]);
    return a.values.empty() ? 0.0 : s / static_cast<double>(a.values.size());
}

EvalReport evaluate_dataset(std::span<const SaliencyMap> maps, std::span<const RegionMask> gts,
                            std::span<const std::string> ids) {
    if (maps.empty()) throw Error("evaluate_dataset: empty dataset");
    if (maps.size() != gts.size()) throw Error("evaluate_dataset: map and ground-truth counts differ");
    if (!ids.empty() && ids.size() != maps.size()) throw Error("evaluate_dataset: id count differs");
    const std::size_t n = maps.size();
    std::vector<ImageMetrics> rows(n);
    std::vector<std::vector<PrecisionRecall>> sweeps(n);
    parallel_for(n, [&](std::size_t i) {
        rows[i].id = ids.empty() ? std::to_string(i) : ids[i];
        rows[i].f_measure = f_measure(maps[i], gts[i]);
        rows[i].mae = mae(maps[i], gts[i]);
        sweeps[i].resize(kSweepThresholds);
        for (int t = 0; t < kSweepThresholds; ++t) sweeps[i][t] = precision_recall(maps[i], gts[i], t / 255.0);
    });

    EvalReport r;
    r.rows = std::move(rows);
    for (const auto& row : r.rows) {
        r.f_measure += row.f_measure;
        r.mae += row.mae;
    }
    r.f_measure /= static_cast<double>(n);
    r.mae /= static_cast<double>(n);
    r.pr.thresholds.resize(kSweepThresholds);
    r.pr.precision.assign(kSweepThresholds, 0.0);
    r.pr.recall.assign(kSweepThresholds, 0.0);
    for (int t = 0; t < kSweepThresholds; ++t) {
        r.pr.thresholds[t] = t / 255.0;
        for (std::size_t i = 0; i < n; ++i) {
            r.pr.precision[t] += sweeps[i][t].precision;
            r.pr.recall[t] += sweeps[i][t].recall;
        }
        r.pr.precision[t] /= static_cast<double>(n);
        r.pr.recall[t] /= static_cast<double>(n);
    }
    return r;
}

void write_pr_csv(const std::filesystem::path& path, const PrCurve& pr) {
    std::string out = "threshold,precision,recall\n";
    for (std::size_t i = 0; i < pr.thresholds.size(); ++i)
        out += fmt(pr.thresholds[i]) + "," + fmt(pr.precision[i]) + "," + fmt(pr.recall[i]) + "\n";
    write_file_atomic(path, out);
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
    std::string out = "image,f_measure,mae\n";
    for (const auto& row : report.rows) out += row.id + "," + fmt(row.f_measure) + "," + fmt(row.mae) + "\n";
    out += "mean," + fmt(report.f_measure) + "," + fmt(report.mae) + "\n";
    write_file_atomic(path, out);
}

} // namespace lcnn
