#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "bbfcn/image_io.hpp"
#include "bbfcn/layers.hpp"
#include "bbfcn/rng.hpp"

// Deterministic synthetic-face generator. Faces are ellipses carrying K
// visually distinct blob patterns (one per landmark type) over a textured
// background; the annotation is the exact render position. Generation is a
// pure function of (config, index).

namespace bbfcn {

struct SyntheticConfig {
    int canvas_w = 96;
    int canvas_h = 96;
    int min_faces = 1;
    int max_faces = 1;
    double min_face_side = 40.0;
    double max_face_side = 72.0;
    double position_jitter = 0.03;  // landmark jitter, fraction of face side
    double occlusion_prob = 0.0;
    int k_types = 5;
    uint64_t seed = 0;
};

namespace detail {

// relative landmark layout within the face box: LE, RE, N, LM, RM (and a
// jittered grid for any further types)
inline Point landmark_anchor(int k, int k_types) {
    static const Point five[5] = {{0.32, 0.38}, {0.68, 0.38}, {0.50, 0.58},
                                  {0.35, 0.76}, {0.65, 0.76}};
    if (k < 5) return five[k];
    const int extra = k - 5;
    const int cols = std::max(1, (k_types - 5 + 1) / 2);
    return {0.25 + 0.5 * (extra % cols) / std::max(1, cols - 1 == 0 ? 1 : cols - 1),
            0.30 + 0.12 * (extra / cols)};
}

inline bool blob_inside(int type, double dx, double dy, double r) {
    const double d2 = dx * dx + dy * dy;
    switch (type % 5) {
        case 0: return d2 <= r * r;                                         // disc
        case 1: return std::fabs(dx) <= r * 0.85 && std::fabs(dy) <= r * 0.85;  // square
        case 2: return std::fabs(dx) + std::fabs(dy) <= r * 1.2;            // diamond
        case 3: return d2 <= r * r && d2 >= 0.25 * r * r;                   // ring
        default:                                                            // cross
            return (std::fabs(dx) <= 0.45 * r || std::fabs(dy) <= 0.45 * r) &&
                   std::fabs(dx) <= r && std::fabs(dy) <= r;
    }
}

inline void blob_color(int type, float* rgb) {
    static const float colors[5][3] = {{0.95f, 0.10f, 0.10f},
                                       {0.10f, 0.90f, 0.10f},
                                       {0.15f, 0.20f, 0.95f},
                                       {0.95f, 0.90f, 0.10f},
                                       {0.90f, 0.15f, 0.90f}};
    for (int c = 0; c < 3; ++c) rgb[c] = colors[type % 5][c];
}

inline void paint_rect(Image& img, int x0, int y0, int x1, int y1, const float* rgb) {
    x0 = std::max(0, x0);
    y0 = std::max(0, y0);
    x1 = std::min(img.dim(2) - 1, x1);
    y1 = std::min(img.dim(1) - 1, y1);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[c];
}

}  // namespace detail

/// Renders image `index` of the virtual dataset described by `config`.
/// Identical (config, index) always produces a bit-identical result.
inline std::pair<Image, std::vector<AnnotatedFace>> generate_synthetic(
    const SyntheticConfig& config, uint64_t index) {
    require(config.min_faces >= 0 && config.max_faces >= config.min_faces,
            "synthetic: degenerate face count range");
    require(config.max_face_side >= config.min_face_side && config.min_face_side >= 8.0,
            "synthetic: degenerate face size range");
    require(config.k_types >= 1, "synthetic: K must be >= 1");

    uint64_t mix = config.seed ^ (0x9e3779b97f4a7c15ULL + index * 0xd1342543de82ef95ULL);
    Rng rng(splitmix64(mix));

    const int W = config.canvas_w, H = config.canvas_h;
    Image img({3, H, W});

    // low-frequency background: random 6x6 color grid, bilinearly upsampled
    Tensor<float> grid({3, 6, 6});
    for (float& v : grid.data) v = static_cast<float>(rng.uniform(0.15, 0.75));
    Image bg = bilinear_resize(grid, H, W);
    for (int64_t i = 0; i < img.size(); ++i)
        img.data[static_cast<size_t>(i)] = std::clamp(
            bg.data[static_cast<size_t>(i)] + static_cast<float>(rng.uniform(-0.04, 0.04)), 0.0f,
            1.0f);

    const int face_count = rng.next_int(config.min_faces, config.max_faces);
    std::vector<AnnotatedFace> faces;

    for (int f = 0; f < face_count; ++f) {
        const double max_side =
            std::min({config.max_face_side, static_cast<double>(W), static_cast<double>(H)});
        if (max_side < config.min_face_side) break;

        Box box;
        bool placed = false;
        for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
            const double s = rng.uniform(config.min_face_side, max_side);
            box = {rng.uniform(0.0, W - s), rng.uniform(0.0, H - s), s, s};
            placed = true;
            for (const auto& other : faces)
                if (iou(box, other.box) > 0.1) placed = false;
        }
        if (!placed) continue;

        const double s = box.w;
        // face ellipse
        const float skin[3] = {static_cast<float>(rng.uniform(0.70, 0.88)),
                               static_cast<float>(rng.uniform(0.55, 0.70)),
                               static_cast<float>(rng.uniform(0.42, 0.55))};
        const double ecx = box.x + s / 2, ecy = box.y + s / 2;
        const double ax = 0.46 * s, ay = 0.50 * s;
        for (int y = std::max(0, static_cast<int>(ecy - ay));
             y <= std::min(H - 1, static_cast<int>(ecy + ay)); ++y)
            for (int x = std::max(0, static_cast<int>(ecx - ax));
                 x <= std::min(W - 1, static_cast<int>(ecx + ax)); ++x) {
                const double nx = (x - ecx) / ax, ny = (y - ecy) / ay;
                if (nx * nx + ny * ny <= 1.0)
                    for (int c = 0; c < 3; ++c) img.at(c, y, x) = skin[c];
            }

        AnnotatedFace face;
        face.path = "synthetic:" + std::to_string(index) + ":" + std::to_string(f);
        face.box = box;

        const double r = std::max(2.0, 0.08 * s);
        for (int k = 0; k < config.k_types; ++k) {
            const Point anchor = detail::landmark_anchor(k, config.k_types);
            const double jitter = config.position_jitter * s;
            double lx = box.x + anchor.x * s + rng.uniform(-jitter, jitter);
            double ly = box.y + anchor.y * s + rng.uniform(-jitter, jitter);
            // keep the whole blob (and thus the landmark) inside the box
            lx = std::clamp(lx, box.x + r, box.x + s - r);
            ly = std::clamp(ly, box.y + r, box.y + s - r);

            float rgb[3];
            detail::blob_color(k, rgb);
            for (int y = std::max(0, static_cast<int>(ly - r));
                 y <= std::min(H - 1, static_cast<int>(ly + r)); ++y)
                for (int x = std::max(0, static_cast<int>(lx - r));
                     x <= std::min(W - 1, static_cast<int>(lx + r)); ++x)
                    if (detail::blob_inside(k, x - lx, y - ly, r))
                        for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[c];

            face.landmarks.push_back({lx, ly, true});
        }

        // occluder: gray rectangle over one landmark, which becomes invisible
        if (config.occlusion_prob > 0.0 && rng.next_double() < config.occlusion_prob) {
            const int k = rng.next_int(0, config.k_types - 1);
            Landmark& lm = face.landmarks[static_cast<size_t>(k)];
            const float gray[3] = {0.45f, 0.45f, 0.45f};
            const int half = static_cast<int>(1.6 * r);
            detail::paint_rect(img, static_cast<int>(lm.x) - half, static_cast<int>(lm.y) - half,
                               static_cast<int>(lm.x) + half, static_cast<int>(lm.y) + half, gray);
            lm.visible = false;
        }

        faces.push_back(std::move(face));
    }
    return {std::move(img), std::move(faces)};
}

}  // namespace bbfcn
