#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "bbfcn/heatmap.hpp"
#include "bbfcn/image_io.hpp"
#include "bbfcn/net.hpp"

// Test-time procedures: constrained single-face decoding, and unconstrained
// pyramid detection with candidate extraction, per-type NMS and branch
// refinement.

namespace bbfcn {

struct PyramidLevel {
    int level = 0;
    double scale = 1.0;  // level frame = original frame * scale
    Image image;
};

/// Candidate tuple {k, l, v, (x,y)}: a super-threshold coarse response and
/// its 12x12 refinement region in the level frame.
struct Candidate {
    int type = 0;
    int level = 0;
    float value = 0.0f;
    int x = 0;  // level-frame location
    int y = 0;

    Box region_level_frame() const {
        return {static_cast<double>(x) - 6.0, static_cast<double>(y) - 6.0, 12.0, 12.0};
    }
};

struct LandmarkDetection {
    int type = 0;
    double x = 0.0;  // original-image frame, fractional
    double y = 0.0;
    float score = 0.0f;
    int level = 0;
};

/// Level l has smaller side round(32 * 1.16^l); the longer side follows the
/// exact scale, so aspect ratio is preserved up to rounding. Levels above
/// native resolution are retained (tiny faces need upsampling).
inline std::vector<PyramidLevel> build_pyramid(const Image& image, int levels,
                                               int base_side = 32, double factor = 1.16) {
    require(levels >= 1, "pyramid: need at least one level");
    require(image.dim(1) >= 1 && image.dim(2) >= 1, "pyramid: empty image");
    const int h = image.dim(1), w = image.dim(2);
    const int small_side = std::min(h, w);

    std::vector<PyramidLevel> pyramid;
    pyramid.reserve(static_cast<size_t>(levels));
    for (int l = 0; l < levels; ++l) {
        const int target_small =
            static_cast<int>(std::lround(base_side * std::pow(factor, l)));
        const double scale = static_cast<double>(target_small) / small_side;
        int th, tw;
        if (h <= w) {
            th = target_small;
            tw = static_cast<int>(std::lround(w * scale));
        } else {
            tw = target_small;
            th = static_cast<int>(std::lround(h * scale));
        }
        pyramid.push_back({l, scale, bilinear_resize(image, th, tw)});
    }
    return pyramid;
}

/// The backbone needs dims divisible by 4; pads right/bottom with zeros, runs
/// the net, and returns the heat map cropped back to the level size.
inline Tensor<float> backbone_forward_padded(const BackboneWeights& weights, const Image& image) {
    const int h = image.dim(1), w = image.dim(2);
    const int ph = (h + 3) / 4 * 4, pw = (w + 3) / 4 * 4;
    if (ph == h && pw == w) return backbone_forward(weights, image);
    Image padded = crop_rect_zero_pad(image, 0, 0, pw, ph);
    Tensor<float> heat = backbone_forward(weights, padded);
    return crop_rect_zero_pad(heat, 0, 0, w, h);
}

/// One candidate per (k, x, y) whose response exceeds the threshold.
inline std::vector<Candidate> extract_candidates(const Tensor<float>& heat, int level,
                                                 float threshold) {
    require(std::isfinite(threshold), "extract_candidates: threshold must be finite");
    std::vector<Candidate> out;
    const int K = heat.dim(0), H = heat.dim(1), W = heat.dim(2);
    for (int k = 0; k < K; ++k)
        for (int y = 0; y < H; ++y) {
            const float* row = heat.row(k, y);
            for (int x = 0; x < W; ++x)
                if (row[x] > threshold) out.push_back({k, level, row[x], x, y});
        }
    return out;
}

struct ScoredBox {
    Box box;
    float score = 0.0f;
    int index = 0;  // caller payload
};

/// Greedy NMS: repeatedly keep the highest-scoring remaining box and drop
/// everything overlapping it with IoU > threshold. Kept boxes come back in
/// descending score order (ties by original index, for determinism).
inline std::vector<ScoredBox> nms(std::vector<ScoredBox> boxes, double iou_threshold) {
    std::stable_sort(boxes.begin(), boxes.end(), [](const ScoredBox& a, const ScoredBox& b) {
        return a.score > b.score;
    });
    std::vector<ScoredBox> kept;
    std::vector<bool> dead(boxes.size(), false);
    for (size_t i = 0; i < boxes.size(); ++i) {
        if (dead[i]) continue;
        kept.push_back(boxes[i]);
        for (size_t j = i + 1; j < boxes.size(); ++j)
            if (!dead[j] && iou(boxes[i].box, boxes[j].box) > iou_threshold) dead[j] = true;
    }
    return kept;
}

inline Point level_to_original(Point p, double scale) {
    require(scale > 0.0, "level_to_original: scale must be positive");
    return {p.x / scale, p.y / scale};
}

inline Box level_to_original(const Box& b, double scale) {
    require(scale > 0.0, "level_to_original: scale must be positive");
    return {b.x / scale, b.y / scale, b.w / scale, b.h / scale};
}

/// A fine point (u,v) decoded in the 24x24 branch patch maps back into the
/// level frame of the 12x12 region centered at (cx, cy).
inline Point patch_to_level(int cx, int cy, Point fine) {
    return {cx - 6.0 + fine.x / 2.0, cy - 6.0 + fine.y / 2.0};
}

/// Branch refinement of one candidate: crop the 12x12 RGB and heat patches at
/// (x,y) (zero-padded at borders), magnify both to 24x24, stack to four
/// channels and decode Ave{M_f, 13}. A fine point (u,v) in the 24x24 patch
/// frame maps to level frame (x - 6 + u/2, y - 6 + v/2).
inline LandmarkDetection refine_candidate(const Candidate& cand, const Image& level_image,
                                          const Tensor<float>& level_heat,
                                          const BranchWeights& branches, double level_scale) {
    Tensor<float> rgb = crop_with_zero_pad(level_image, cand.x, cand.y, 12);
    Tensor<float> heat_k = crop_rect_zero_pad(
        Tensor<float>({1, level_heat.dim(1), level_heat.dim(2)},
                      std::vector<float>(level_heat.data.begin() +
                                             static_cast<size_t>(cand.type) * level_heat.dim(1) *
                                                 level_heat.dim(2),
                                         level_heat.data.begin() +
                                             static_cast<size_t>(cand.type + 1) *
                                                 level_heat.dim(1) * level_heat.dim(2))),
        cand.x - 6, cand.y - 6, 12, 12);

    Tensor<float> rgb24 = bilinear_resize(rgb, 24, 24);
    Tensor<float> heat24 = bilinear_resize(heat_k, 24, 24);

    Tensor<float> patch({4, 24, 24});
    std::copy(rgb24.data.begin(), rgb24.data.end(), patch.data.begin());
    std::copy(heat24.data.begin(), heat24.data.end(), patch.data.begin() + 3 * 24 * 24);

    Tensor<float> fine = branch_forward(branches, cand.type, patch);
    const Point f = decode_top_n_average(fine, 13);
    const Point level_pt = {cand.x - 6.0 + f.x / 2.0, cand.y - 6.0 + f.y / 2.0};
    const Point orig = level_to_original(level_pt, level_scale);
    return {cand.type, orig.x, orig.y, cand.value, cand.level};
}

/// Constrained setting: one pre-cropped face, exactly K landmarks out.
/// Backbone at 32x32, Ave{M_c^k, 13} coarse decode, 64x64 magnification,
/// 24x24 branch patch at the doubled coarse point, Ave{M_f^k, 13} fine
/// decode, mapped back to the face-crop frame.
inline LandmarkSet detect_constrained(const Image& face, const BackboneWeights& backbone,
                                      const BranchWeights& branches,
                                      LandmarkSet* coarse_out = nullptr) {
    require(face.dim(1) >= 1 && face.dim(2) >= 1, "detect_constrained: degenerate input");
    const int K = backbone.net.spec.back().out_channels;
    const int H = face.dim(1), W = face.dim(2);

    Image small = bilinear_resize(face, 32, 32);
    Tensor<float> coarse_map = backbone_forward(backbone, small);

    Image magnified = bilinear_resize(face, 64, 64);
    Tensor<float> heat64 = bilinear_resize(coarse_map, 64, 64);

    LandmarkSet result;
    for (int k = 0; k < K; ++k) {
        Tensor<float> channel({1, 32, 32},
                              std::vector<float>(coarse_map.data.begin() + k * 32 * 32,
                                                 coarse_map.data.begin() + (k + 1) * 32 * 32));
        const Point c = decode_top_n_average(channel, 13);
        if (coarse_out)
            coarse_out->push_back({c.x * 2.0 * W / 64.0, c.y * 2.0 * H / 64.0, true});

        const int cx = static_cast<int>(std::lround(2.0 * c.x));
        const int cy = static_cast<int>(std::lround(2.0 * c.y));

        Tensor<float> rgb = crop_with_zero_pad(magnified, cx, cy, 24);
        Tensor<float> hk = crop_rect_zero_pad(
            Tensor<float>({1, 64, 64},
                          std::vector<float>(heat64.data.begin() + k * 64 * 64,
                                             heat64.data.begin() + (k + 1) * 64 * 64)),
            cx - 12, cy - 12, 24, 24);

        Tensor<float> patch({4, 24, 24});
        std::copy(rgb.data.begin(), rgb.data.end(), patch.data.begin());
        std::copy(hk.data.begin(), hk.data.end(), patch.data.begin() + 3 * 24 * 24);

        Tensor<float> fine = branch_forward(branches, k, patch);
        const Point f = decode_top_n_average(fine, 13);
        const double x64 = cx - 12.0 + f.x;
        const double y64 = cy - 12.0 + f.y;
        result.push_back({x64 * W / 64.0, y64 * H / 64.0, true});
    }
    return result;
}

/// Unconstrained setting: pyramid, per-level backbone, candidate extraction,
/// per-type NMS in the original frame, branch refinement of the survivors.
/// `refine` = false gives the backbone-only (coarse) detections, used by the
/// ablation report. Output is canonically ordered (type, score desc).
inline std::vector<LandmarkDetection> detect_unconstrained(const Image& image,
                                                           const BackboneWeights& backbone,
                                                           const BranchWeights& branches,
                                                           float threshold, int levels,
                                                           bool refine = true) {
    const std::vector<PyramidLevel> pyramid = build_pyramid(image, levels);
    const int K = backbone.net.spec.back().out_channels;

    std::vector<Tensor<float>> heats;
    heats.reserve(pyramid.size());
    std::vector<Candidate> candidates;
    for (const auto& level : pyramid) {
        heats.push_back(backbone_forward_padded(backbone, level.image));
        auto cs = extract_candidates(heats.back(), level.level, threshold);
        candidates.insert(candidates.end(), cs.begin(), cs.end());
    }

    std::vector<LandmarkDetection> detections;
    for (int k = 0; k < K; ++k) {
        std::vector<ScoredBox> boxes;
        for (size_t i = 0; i < candidates.size(); ++i) {
            if (candidates[i].type != k) continue;
            const Box region = level_to_original(candidates[i].region_level_frame(),
                                                 pyramid[static_cast<size_t>(candidates[i].level)].scale);
            boxes.push_back({region, candidates[i].value, static_cast<int>(i)});
        }
        for (const ScoredBox& kept : nms(std::move(boxes), 0.5)) {
            const Candidate& cand = candidates[static_cast<size_t>(kept.index)];
            const PyramidLevel& level = pyramid[static_cast<size_t>(cand.level)];
            if (refine) {
                detections.push_back(refine_candidate(cand, level.image,
                                                      heats[static_cast<size_t>(cand.level)],
                                                      branches, level.scale));
            } else {
                const Point orig = level_to_original(
                    Point{static_cast<double>(cand.x), static_cast<double>(cand.y)}, level.scale);
                detections.push_back({cand.type, orig.x, orig.y, cand.value, cand.level});
            }
        }
    }
    std::stable_sort(detections.begin(), detections.end(),
                     [](const LandmarkDetection& a, const LandmarkDetection& b) {
                         if (a.type != b.type) return a.type < b.type;
                         if (a.score != b.score) return a.score > b.score;
                         if (a.y != b.y) return a.y < b.y;
                         return a.x < b.x;
                     });
    return detections;
}

}  // namespace bbfcn
