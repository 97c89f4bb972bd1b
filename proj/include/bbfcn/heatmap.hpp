#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "bbfcn/geometry.hpp"
#include "bbfcn/rng.hpp"
#include "bbfcn/tensor.hpp"

// Ground-truth heat-map rendering, top-n average decoding, the balanced
// selection masks used during training, and the masked L2 loss.

namespace bbfcn {

/// Heat maps are K x H x W tensors, channel per landmark type. Ground-truth
/// maps are binary; predicted maps are unconstrained but finite.
using HeatMapF = Tensor<float>;

/// Disc radius in pixels: fraction of the map width, rounded to nearest
/// integer (32 * 5% -> 2, 64 * 3% -> 2).
inline int disc_radius(int width, double fraction) {
    return std::max(1, static_cast<int>(std::lround(width * fraction)));
}

/// Number of integer pixels inside a fully interior disc of the given radius.
/// Radius 2 gives 13; decode_top_n_average's n is tied to this.
inline int disc_pixel_count(int radius) {
    int n = 0;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx)
            if (dx * dx + dy * dy <= radius * radius) ++n;
    return n;
}

/// Marks a circular region of 1s (radius in pixels, Euclidean metric) around
/// each visible landmark; channel k of the result belongs to type k.
/// Out-of-frame centers simply clip.
template <typename T = float>
Tensor<T> render_ground_truth(const LandmarkSet& landmarks, int height, int width, int radius) {
    Tensor<T> map({static_cast<int>(landmarks.size()), height, width});
    const double r2 = static_cast<double>(radius) * radius;
    for (size_t k = 0; k < landmarks.size(); ++k) {
        const Landmark& p = landmarks[k];
        if (!p.visible) continue;
        const int y0 = std::max(0, static_cast<int>(std::ceil(p.y - radius)));
        const int y1 = std::min(height - 1, static_cast<int>(std::floor(p.y + radius)));
        for (int y = y0; y <= y1; ++y) {
            const int x0 = std::max(0, static_cast<int>(std::ceil(p.x - radius)));
            const int x1 = std::min(width - 1, static_cast<int>(std::floor(p.x + radius)));
            for (int x = x0; x <= x1; ++x) {
                const double dx = x - p.x, dy = y - p.y;
                if (dx * dx + dy * dy <= r2) map.at(static_cast<int>(k), y, x) = T(1);
            }
        }
    }
    return map;
}

/// Ave{M, n}: mean coordinate of the n highest-valued locations of a
/// single-channel map. Ties break row-major (smaller y, then smaller x),
/// so the result is deterministic.
template <typename T>
Point decode_top_n_average(const Tensor<T>& map, int n) {
    require(map.rank() == 3 && map.dim(0) == 1, "decode: map must be 1 x H x W");
    const int H = map.dim(1), W = map.dim(2);
    require(n >= 1 && n <= H * W, "decode: n out of range");

    std::vector<int> order(static_cast<size_t>(H) * W);
    std::iota(order.begin(), order.end(), 0);
    const T* v = map.data.data();
    std::partial_sort(order.begin(), order.begin() + n, order.end(), [&](int a, int b) {
        if (v[a] != v[b]) return v[a] > v[b];
        return a < b;  // row-major tie break
    });
    double sx = 0.0, sy = 0.0;
    for (int i = 0; i < n; ++i) {
        sx += order[i] % W;
        sy += order[i] / W;
    }
    return {sx / n, sy / n};
}

/// Copy of channel k as a 1 x H x W map.
template <typename T>
Tensor<T> extract_channel(const Tensor<T>& map, int k) {
    require(map.rank() == 3 && k >= 0 && k < map.dim(0), "extract_channel: bad channel");
    const size_t plane = static_cast<size_t>(map.dim(1)) * map.dim(2);
    return Tensor<T>({1, map.dim(1), map.dim(2)},
                     std::vector<T>(map.data.begin() + static_cast<int64_t>(k * plane),
                                    map.data.begin() + static_cast<int64_t>((k + 1) * plane)));
}

/// Which locations of one heat-map channel contribute to the loss.
struct SelectionMask {
    Tensor<uint8_t> selected;  // 1 x H x W congruent to the channel
    int positive_count = 0;
    int negative_count = 0;
};

/// Selective sampling: every positive (disc) location is selected, plus an
/// equal count of negatives -- uniformly at random, or in mining mode the
/// negatives with the highest predicted responses. A channel without
/// positives gets ceil(negative_only_fraction * H * W) random negatives.
template <typename T>
SelectionMask build_selection_mask(const Tensor<T>& gt_channel, uint64_t seed,
                                   double negative_only_fraction,
                                   const Tensor<T>* mining_pred = nullptr) {
    require(gt_channel.rank() == 3 && gt_channel.dim(0) == 1,
            "selection mask: channel must be 1 x H x W");
    const int H = gt_channel.dim(1), W = gt_channel.dim(2);
    const int total = H * W;

    SelectionMask mask;
    mask.selected = Tensor<uint8_t>({1, H, W});

    std::vector<int> negatives;
    negatives.reserve(static_cast<size_t>(total));
    for (int i = 0; i < total; ++i) {
        if (gt_channel.data[i] != T(0)) {
            mask.selected.data[i] = 1;
            ++mask.positive_count;
        } else {
            negatives.push_back(i);
        }
    }

    int want = 0;
    if (mask.positive_count > 0) {
        want = std::min(mask.positive_count, static_cast<int>(negatives.size()));
    } else {
        want = std::min(static_cast<int>(std::ceil(negative_only_fraction * total)),
                        static_cast<int>(negatives.size()));
    }

    if (mining_pred != nullptr && mask.positive_count > 0) {
        // hard negatives: non-landmark locations with the largest responses
        const T* pv = mining_pred->data.data();
        std::partial_sort(negatives.begin(), negatives.begin() + want, negatives.end(),
                          [&](int a, int b) {
                              if (pv[a] != pv[b]) return pv[a] > pv[b];
                              return a < b;
                          });
    } else {
        // partial Fisher-Yates, seeded
        Rng rng(seed);
        for (int i = 0; i < want; ++i) {
            const int j = i + static_cast<int>(rng.next_below(negatives.size() - i));
            std::swap(negatives[i], negatives[static_cast<size_t>(j)]);
        }
    }
    for (int i = 0; i < want; ++i) mask.selected.data[negatives[static_cast<size_t>(i)]] = 1;
    mask.negative_count = want;
    return mask;
}

/// Selected-location squared error over all channels:
///   loss = sum_{selected} (pred - gt)^2, gradient 2*(pred - gt) on selected
/// locations and exactly zero elsewhere. Batch averaging is the caller's job.
template <typename T>
std::pair<double, Tensor<T>> masked_mse_loss(const Tensor<T>& pred, const Tensor<T>& gt,
                                             const std::vector<SelectionMask>& masks) {
    require(pred.same_shape(gt), "masked_mse_loss: pred/gt shape mismatch");
    require(static_cast<int>(masks.size()) == pred.dim(0),
            "masked_mse_loss: one mask per channel required");
    const int K = pred.dim(0);
    const int plane = pred.dim(1) * pred.dim(2);

    double loss = 0.0;
    Tensor<T> grad(pred.shape);
    for (int k = 0; k < K; ++k) {
        require(masks[static_cast<size_t>(k)].selected.dim(1) == pred.dim(1) &&
                    masks[static_cast<size_t>(k)].selected.dim(2) == pred.dim(2),
                "masked_mse_loss: mask shape mismatch");
        const uint8_t* sel = masks[static_cast<size_t>(k)].selected.data.data();
        const T* p = pred.data.data() + static_cast<size_t>(k) * plane;
        const T* g = gt.data.data() + static_cast<size_t>(k) * plane;
        T* out = grad.data.data() + static_cast<size_t>(k) * plane;
        for (int i = 0; i < plane; ++i) {
            if (!sel[i]) continue;
            const double d = static_cast<double>(p[i]) - static_cast<double>(g[i]);
            loss += d * d;
            out[i] = static_cast<T>(2.0 * d);
        }
    }
    return {loss, std::move(grad)};
}

}  // namespace bbfcn
