#pragma once

#include <functional>
#include <vector>

#include "bbfcn/inference.hpp"

// Landmark-derived face proposals: a 32x32 window in the detection's pyramid
// level, mapped to the original frame, suppressed per type and then across
// types.

namespace bbfcn {

struct ProposalBox {
    Box box;  // original-image pixels
    float score = 0.0f;
    int type = 0;
};

/// Box of side 32/scale_l centered at the detection's original-frame point;
/// the score is the landmark response.
inline std::vector<ProposalBox> landmarks_to_proposals(
    const std::vector<LandmarkDetection>& detections, const std::vector<double>& level_scales) {
    std::vector<ProposalBox> out;
    out.reserve(detections.size());
    for (const auto& d : detections) {
        require(d.level >= 0 && d.level < static_cast<int>(level_scales.size()),
                "proposals: detection level has no recorded scale");
        const double side = 32.0 / level_scales[static_cast<size_t>(d.level)];
        out.push_back({{d.x - side / 2.0, d.y - side / 2.0, side, side}, d.score, d.type});
    }
    return out;
}

/// Hook between the two NMS stages where an external location refiner could
/// run; the default is identity.
using ProposalRefiner = std::function<std::vector<ProposalBox>(std::vector<ProposalBox>)>;

/// Per-type NMS, then NMS across all surviving proposals, both greedy at the
/// given IoU threshold.
inline std::vector<ProposalBox> suppress_proposals(const std::vector<ProposalBox>& proposals,
                                                   double iou_threshold = 0.5,
                                                   const ProposalRefiner& refiner = nullptr) {
    int max_type = -1;
    for (const auto& p : proposals) max_type = std::max(max_type, p.type);

    std::vector<ProposalBox> merged;
    for (int k = 0; k <= max_type; ++k) {
        std::vector<ScoredBox> boxes;
        for (size_t i = 0; i < proposals.size(); ++i)
            if (proposals[i].type == k)
                boxes.push_back({proposals[i].box, proposals[i].score, static_cast<int>(i)});
        for (const ScoredBox& kept : nms(std::move(boxes), iou_threshold))
            merged.push_back(proposals[static_cast<size_t>(kept.index)]);
    }

    if (refiner) merged = refiner(std::move(merged));

    std::vector<ScoredBox> all;
    for (size_t i = 0; i < merged.size(); ++i)
        all.push_back({merged[i].box, merged[i].score, static_cast<int>(i)});
    std::vector<ProposalBox> out;
    for (const ScoredBox& kept : nms(std::move(all), iou_threshold))
        out.push_back(merged[static_cast<size_t>(kept.index)]);
    return out;
}

/// Height grows by the fraction, center preserved, width unchanged.
inline ProposalBox enlarge_vertical(const ProposalBox& p, double fraction = 0.25) {
    require(fraction >= 0.0, "enlarge_vertical: fraction must be >= 0");
    ProposalBox out = p;
    const double cy = p.box.y + p.box.h / 2.0;
    out.box.h = p.box.h * (1.0 + fraction);
    out.box.y = cy - out.box.h / 2.0;
    return out;
}

}  // namespace bbfcn
