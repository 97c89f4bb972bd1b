#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "bbfcn/image_io.hpp"
#include "bbfcn/inference.hpp"

// Mean-error and recall-error evaluation. Errors are Euclidean distances
// normalized by the interocular distance, reported in percent.

namespace bbfcn {

enum class InterocularMode { EyeCenters, OuterCorners, BboxFallback };

struct EvalConfig {
    InterocularMode mode = InterocularMode::EyeCenters;
    int left_eye_type = 0;
    int right_eye_type = 1;
    int left_corner_type = 0;   // outer-corner landmark indices when annotated
    int right_corner_type = 1;
    double bbox_fallback_ratio = 0.419;
    std::vector<double> pe_grid = {0.02, 0.04, 0.05, 0.06, 0.08, 0.10, 0.12, 0.15, 0.20};
    int budget_m = 15;  // predictions kept per type per image
};

/// Normalizer of the error metric. When an eye is invisible (or in bbox mode)
/// falls back to ratio * box length.
inline double interocular_distance(const AnnotatedFace& face, const EvalConfig& config) {
    const auto eye_pair = [&](int a, int b) -> double {
        const Landmark& le = face.landmarks.at(static_cast<size_t>(a));
        const Landmark& re = face.landmarks.at(static_cast<size_t>(b));
        if (!le.visible || !re.visible) return -1.0;
        return std::hypot(le.x - re.x, le.y - re.y);
    };
    double d = -1.0;
    switch (config.mode) {
        case InterocularMode::EyeCenters:
            d = eye_pair(config.left_eye_type, config.right_eye_type);
            break;
        case InterocularMode::OuterCorners:
            d = eye_pair(config.left_corner_type, config.right_corner_type);
            break;
        case InterocularMode::BboxFallback:
            break;
    }
    if (d > 0.0) return d;
    const double box_len = std::max(face.box.w, face.box.h);
    if (box_len <= 0.0) throw EvalError("interocular distance unavailable: no eyes and no box");
    return config.bbox_fallback_ratio * box_len;
}

struct MeanErrorReport {
    std::vector<double> per_type_pct;  // mean over faces, percent
    double average_pct = 0.0;          // A: unweighted mean over types
};

/// err = ||detection - gt|| / interocular * 100%, averaged per type over
/// faces, then averaged over types. Invisible ground truth is excluded.
/// detections[f] must hold exactly one point per landmark type of face f.
inline MeanErrorReport mean_error(const std::vector<LandmarkSet>& detections,
                                  const std::vector<AnnotatedFace>& ground_truth,
                                  const EvalConfig& config) {
    if (detections.size() != ground_truth.size())
        throw EvalError("mean_error: detection/ground-truth count mismatch");
    if (ground_truth.empty()) throw EvalError("mean_error: empty evaluation set");
    const size_t K = ground_truth.front().landmarks.size();

    std::vector<double> sums(K, 0.0);
    std::vector<int> counts(K, 0);
    for (size_t f = 0; f < ground_truth.size(); ++f) {
        const AnnotatedFace& gt = ground_truth[f];
        if (detections[f].size() != K)
            throw EvalError("mean_error: detection cardinality mismatch");
        const double io = interocular_distance(gt, config);
        for (size_t k = 0; k < K; ++k) {
            if (!gt.landmarks[k].visible) continue;
            const double dist = std::hypot(detections[f][k].x - gt.landmarks[k].x,
                                           detections[f][k].y - gt.landmarks[k].y);
            sums[k] += dist / io * 100.0;
            ++counts[k];
        }
    }
    MeanErrorReport report;
    double total = 0.0;
    for (size_t k = 0; k < K; ++k) {
        report.per_type_pct.push_back(counts[k] > 0 ? sums[k] / counts[k] : 0.0);
        total += report.per_type_pct.back();
    }
    report.average_pct = total / static_cast<double>(K);
    return report;
}

struct RecallCurve {
    std::vector<double> pe;      // position-error thresholds (fractions)
    std::vector<double> recall;  // matched GT fraction at each threshold
};

struct RecallReport {
    std::vector<RecallCurve> per_type;
    std::vector<double> average_recall;  // over types, per PE point
    double average_at(double pe_value) const {
        for (size_t i = 0; i < per_type.front().pe.size(); ++i)
            if (std::fabs(per_type.front().pe[i] - pe_value) < 1e-12) return average_recall[i];
        throw EvalError("requested PE value is not on the evaluation grid");
    }
};

/// Unconstrained-protocol recall: per image, keep the top-m predictions per
/// type; a prediction recalls a same-type ground-truth landmark if it lies
/// within PE * interocular of it. Matching is greedy by descending score,
/// one-to-one, nearest unmatched ground truth first.
inline RecallReport recall_error_curve(
    const std::vector<std::vector<LandmarkDetection>>& predictions_per_image,
    const std::vector<std::vector<AnnotatedFace>>& faces_per_image, const EvalConfig& config,
    int k_types) {
    if (predictions_per_image.size() != faces_per_image.size())
        throw EvalError("recall: prediction/image count mismatch");

    RecallReport report;
    report.per_type.resize(static_cast<size_t>(k_types));
    for (auto& c : report.per_type) c.pe = config.pe_grid;

    for (int k = 0; k < k_types; ++k) {
        std::vector<double> matched(config.pe_grid.size(), 0.0);
        int total_gt = 0;
        for (size_t img = 0; img < faces_per_image.size(); ++img) {
            // ground truth of type k with its per-face normalizer
            struct Gt {
                double x, y, io;
            };
            std::vector<Gt> gts;
            for (const auto& face : faces_per_image[img]) {
                const Landmark& lm = face.landmarks.at(static_cast<size_t>(k));
                if (!lm.visible) continue;
                gts.push_back({lm.x, lm.y, interocular_distance(face, config)});
            }
            total_gt += static_cast<int>(gts.size());
            if (gts.empty()) continue;

            std::vector<LandmarkDetection> preds;
            for (const auto& d : predictions_per_image[img])
                if (d.type == k) preds.push_back(d);
            std::stable_sort(preds.begin(), preds.end(),
                             [](const LandmarkDetection& a, const LandmarkDetection& b) {
                                 return a.score > b.score;
                             });
            if (static_cast<int>(preds.size()) > config.budget_m)
                preds.resize(static_cast<size_t>(config.budget_m));

            for (size_t pi = 0; pi < config.pe_grid.size(); ++pi) {
                const double pe = config.pe_grid[pi];
                std::vector<bool> used(gts.size(), false);
                int hit = 0;
                for (const auto& p : preds) {
                    int best = -1;
                    double best_dist = 0.0;
                    for (size_t g = 0; g < gts.size(); ++g) {
                        if (used[g]) continue;
                        const double dist = std::hypot(p.x - gts[g].x, p.y - gts[g].y);
                        if (dist <= pe * gts[g].io && (best < 0 || dist < best_dist)) {
                            best = static_cast<int>(g);
                            best_dist = dist;
                        }
                    }
                    if (best >= 0) {
                        used[static_cast<size_t>(best)] = true;
                        ++hit;
                    }
                }
                matched[pi] += hit;
            }
        }
        for (size_t pi = 0; pi < config.pe_grid.size(); ++pi)
            report.per_type[static_cast<size_t>(k)].recall.push_back(
                total_gt > 0 ? matched[pi] / total_gt : 0.0);
    }

    report.average_recall.assign(config.pe_grid.size(), 0.0);
    for (int k = 0; k < k_types; ++k)
        for (size_t pi = 0; pi < config.pe_grid.size(); ++pi)
            report.average_recall[pi] += report.per_type[static_cast<size_t>(k)].recall[pi];
    for (double& r : report.average_recall) r /= k_types;
    return report;
}

struct AblationReport {
    MeanErrorReport coarse;
    MeanErrorReport fine;
    std::vector<double> difference_pct;  // coarse - fine, per type
    double average_difference_pct = 0.0;
};

/// Side-by-side comparison of the single backbone against the full cascade
/// over the same faces.
inline AblationReport ablation_report(const std::vector<LandmarkSet>& coarse_detections,
                                      const std::vector<LandmarkSet>& fine_detections,
                                      const std::vector<AnnotatedFace>& ground_truth,
                                      const EvalConfig& config) {
    AblationReport report;
    report.coarse = mean_error(coarse_detections, ground_truth, config);
    report.fine = mean_error(fine_detections, ground_truth, config);
    for (size_t k = 0; k < report.coarse.per_type_pct.size(); ++k)
        report.difference_pct.push_back(report.coarse.per_type_pct[k] -
                                        report.fine.per_type_pct[k]);
    report.average_difference_pct = report.coarse.average_pct - report.fine.average_pct;
    return report;
}

inline std::string format_mean_error_table(const MeanErrorReport& report,
                                           const std::vector<std::string>& names) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(2);
    for (size_t k = 0; k < report.per_type_pct.size(); ++k) {
        const std::string name = k < names.size() ? names[k] : ("L" + std::to_string(k));
        out << name << " " << report.per_type_pct[k] << "\n";
    }
    out << "A " << report.average_pct << "\n";
    return out.str();
}

inline std::string format_mean_error_csv(const MeanErrorReport& report,
                                         const std::vector<std::string>& names) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4) << "type,mean_error_pct\n";
    for (size_t k = 0; k < report.per_type_pct.size(); ++k) {
        const std::string name = k < names.size() ? names[k] : ("L" + std::to_string(k));
        out << name << "," << report.per_type_pct[k] << "\n";
    }
    out << "A," << report.average_pct << "\n";
    return out.str();
}

inline std::string format_recall_csv(const RecallReport& report,
                                     const std::vector<std::string>& names) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    for (size_t k = 0; k < report.per_type.size(); ++k) {
        const std::string name = k < names.size() ? names[k] : ("L" + std::to_string(k));
        out << "# " << name << "\npe,recall\n";
        for (size_t i = 0; i < report.per_type[k].pe.size(); ++i)
            out << report.per_type[k].pe[i] << "," << report.per_type[k].recall[i] << "\n";
    }
    out << "# average\npe,recall\n";
    for (size_t i = 0; i < report.average_recall.size(); ++i)
        out << report.per_type.front().pe[i] << "," << report.average_recall[i] << "\n";
    return out.str();
}

}  // namespace bbfcn
