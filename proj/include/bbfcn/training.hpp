#pragma once

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "bbfcn/heatmap.hpp"
#include "bbfcn/image_io.hpp"
#include "bbfcn/net.hpp"
#include "bbfcn/serialize.hpp"
#include "bbfcn/synthetic.hpp"

// Training loops for the backbone and the K branch refiners: balanced batch
// assembly, selective masked loss, SGD schedules, and the random-to-hard
// negative mining switch. Single-worker and fully deterministic for a given
// seed.

namespace bbfcn {

struct LrStage {
    int64_t until_iteration;  // exclusive
    float lr;
};

struct TrainConfig {
    int batch_size = 40;
    int backbone_positives = 20;  // 1:1 image ratio
    int backbone_negatives = 20;
    int branch_positives = 32;  // 4:1 patch ratio
    int branch_negatives = 8;
    std::vector<LrStage> backbone_schedule = {{25000, 1e-3f}};
    std::vector<LrStage> branch_schedule = {{30000, 1e-4f}, {50000, 1e-5f}};
    float momentum = 0.9f;
    float weight_decay = 0.0005f;
    int mining_patience = 5;       // consecutive stagnant validation checks
    int validation_interval = 200; // iterations
    double negative_only_fraction = 0.01;
    int jitter_px = 3;  // branch crop-center jitter
    double crop_radius_fraction_coarse = 0.05;  // R_c, fraction of input width
    double crop_radius_fraction_fine = 0.03;    // R_f
    uint64_t seed = 0;
    double divergence_limit = 1e4;
};

inline float lr_at(const std::vector<LrStage>& schedule, int64_t iteration) {
    for (const auto& stage : schedule)
        if (iteration < stage.until_iteration) return stage.lr;
    return schedule.back().lr;
}

/// One annotated face with its source image (one face per record).
struct FaceExample {
    Image image;
    AnnotatedFace face;
};

struct TrainDataset {
    std::vector<FaceExample> faces;
    std::vector<Image> backgrounds;
    int k_types = 5;
};

/// Materializes a synthetic dataset: `face_count` single-face images plus
/// `background_count` face-free images, all from one seed.
inline TrainDataset build_synthetic_dataset(const SyntheticConfig& base, int face_count,
                                            int background_count) {
    TrainDataset ds;
    ds.k_types = base.k_types;
    SyntheticConfig face_cfg = base;
    face_cfg.min_faces = 1;
    face_cfg.max_faces = 1;
    for (int i = 0; i < face_count; ++i) {
        auto [img, faces] = generate_synthetic(face_cfg, static_cast<uint64_t>(i));
        if (faces.empty()) continue;
        ds.faces.push_back({std::move(img), std::move(faces.front())});
    }
    SyntheticConfig bg_cfg = base;
    bg_cfg.min_faces = 0;
    bg_cfg.max_faces = 0;
    for (int i = 0; i < background_count; ++i) {
        auto [img, faces] = generate_synthetic(bg_cfg, static_cast<uint64_t>(1u << 24) + i);
        ds.backgrounds.push_back(std::move(img));
    }
    return ds;
}

struct BackboneSample {
    Tensor<float> input;  // 3 x 32 x 32, [0,1]
    Tensor<float> gt;     // K x 32 x 32, binary
    std::vector<SelectionMask> masks;
    std::vector<uint64_t> mask_seeds;  // per channel, for the mining rebuild
    bool positive = false;
};

struct BranchSample {
    Tensor<float> patch;  // 4 x 24 x 24
    Tensor<float> gt;     // 1 x 24 x 24
    SelectionMask mask;
    uint64_t mask_seed = 0;
    int branch = 0;
    bool positive = false;
};

namespace detail {

/// Square crop around the face box with IoU >= 0.5 against it, following the
/// positive-sampling protocol. Returns the crop rect in image pixels.
inline Box sample_positive_crop(const Box& face_box, Rng& rng) {
    const double s = face_box.w;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double a = s * rng.uniform(0.9, 1.15);
        const double cx = face_box.x + s / 2 + rng.uniform(-0.08, 0.08) * s;
        const double cy = face_box.y + s / 2 + rng.uniform(-0.08, 0.08) * s;
        const Box crop = {cx - a / 2, cy - a / 2, a, a};
        if (iou(crop, face_box) >= 0.5) return crop;
    }
    return face_box;
}

inline Tensor<float> resize_crop(const Image& image, const Box& crop, int side) {
    const int x0 = static_cast<int>(std::lround(crop.x));
    const int y0 = static_cast<int>(std::lround(crop.y));
    const int w = std::max(1, static_cast<int>(std::lround(crop.w)));
    const int h = std::max(1, static_cast<int>(std::lround(crop.h)));
    return bilinear_resize(crop_rect_zero_pad(image, x0, y0, w, h), side, side);
}

}  // namespace detail

/// Backbone minibatch: `backbone_positives` face crops (IoU >= 0.5 with the
/// face box, resized to 32x32, disc ground truth) plus `backbone_negatives`
/// background crops with all-zero ground truth. Deterministic in `rng`.
inline std::vector<BackboneSample> sample_backbone_batch(const TrainDataset& dataset,
                                                         const TrainConfig& config, Rng& rng,
                                                         int face_lo = 0, int face_hi = -1) {
    require(!dataset.faces.empty(), "sample_backbone_batch: empty face pool");
    require(!dataset.backgrounds.empty(), "sample_backbone_batch: empty background pool");
    if (face_hi < 0) face_hi = static_cast<int>(dataset.faces.size());
    require(face_hi > face_lo, "sample_backbone_batch: empty face range");

    const int radius = disc_radius(32, config.crop_radius_fraction_coarse);
    std::vector<BackboneSample> batch;

    for (int i = 0; i < config.backbone_positives; ++i) {
        const auto& ex = dataset.faces[static_cast<size_t>(rng.next_int(face_lo, face_hi - 1))];
        const Box crop = detail::sample_positive_crop(ex.face.box, rng);
        const int x0 = static_cast<int>(std::lround(crop.x));
        const int y0 = static_cast<int>(std::lround(crop.y));
        const double scale = 32.0 / std::lround(crop.w);

        BackboneSample sample;
        sample.positive = true;
        sample.input = detail::resize_crop(ex.image, crop, 32);
        LandmarkSet in_crop;
        for (const auto& lm : ex.face.landmarks) {
            Landmark t = lm;
            t.x = (lm.x - x0) * scale;
            t.y = (lm.y - y0) * scale;
            if (t.x < 0 || t.y < 0 || t.x >= 32 || t.y >= 32) t.visible = false;
            in_crop.push_back(t);
        }
        sample.gt = render_ground_truth<float>(in_crop, 32, 32, radius);
        for (int k = 0; k < dataset.k_types; ++k) {
            const uint64_t seed = rng.next_u64();
            sample.mask_seeds.push_back(seed);
            sample.masks.push_back(build_selection_mask(extract_channel(sample.gt, k), seed,
                                                        config.negative_only_fraction));
        }
        batch.push_back(std::move(sample));
    }

    for (int i = 0; i < config.backbone_negatives; ++i) {
        const Image& bg =
            dataset.backgrounds[static_cast<size_t>(rng.next_below(dataset.backgrounds.size()))];
        const int max_side = std::min(bg.dim(1), bg.dim(2));
        const int side = rng.next_int(std::min(32, max_side), max_side);
        const int x0 = rng.next_int(0, bg.dim(2) - side);
        const int y0 = rng.next_int(0, bg.dim(1) - side);

        BackboneSample sample;
        sample.positive = false;
        sample.input = bilinear_resize(crop_rect_zero_pad(bg, x0, y0, side, side), 32, 32);
        sample.gt = Tensor<float>({dataset.k_types, 32, 32});
        for (int k = 0; k < dataset.k_types; ++k) {
            const uint64_t seed = rng.next_u64();
            sample.mask_seeds.push_back(seed);
            sample.masks.push_back(build_selection_mask(extract_channel(sample.gt, k), seed,
                                                        config.negative_only_fraction));
        }
        batch.push_back(std::move(sample));
    }
    return batch;
}

/// Provides the frozen backbone's 32x32 heat map for a face crop; the
/// per-face result is cached because the backbone does not change during
/// branch training.
class CoarseMapCache {
public:
    explicit CoarseMapCache(const BackboneWeights& backbone) : backbone_(backbone) {}

    const Tensor<float>& face_map(const TrainDataset& dataset, int face_index) {
        auto it = cache_.find(face_index);
        if (it != cache_.end()) return it->second;
        const auto& ex = dataset.faces[static_cast<size_t>(face_index)];
        Tensor<float> crop32 = detail::resize_crop(ex.image, ex.face.box, 32);
        return cache_.emplace(face_index, backbone_forward(backbone_, crop32)).first->second;
    }

    const BackboneWeights& backbone() const { return backbone_; }

private:
    const BackboneWeights& backbone_;
    std::map<int, Tensor<float>> cache_;
};

/// Branch minibatch: `branch_positives` 4-channel 24x24 patches cropped from
/// the 64x64 magnified face and heat map at the ground-truth location plus
/// +-jitter, and `branch_negatives` background patches with zero ground
/// truth.
inline std::vector<BranchSample> sample_branch_batch(const TrainDataset& dataset,
                                                     const TrainConfig& config,
                                                     CoarseMapCache& coarse, Rng& rng,
                                                     int face_lo = 0, int face_hi = -1) {
    require(!dataset.faces.empty(), "sample_branch_batch: empty face pool");
    require(!dataset.backgrounds.empty(), "sample_branch_batch: empty background pool");
    if (face_hi < 0) face_hi = static_cast<int>(dataset.faces.size());

    const int radius = disc_radius(64, config.crop_radius_fraction_fine);
    std::vector<BranchSample> batch;

    auto make_patch = [](const Tensor<float>& img64, const Tensor<float>& heat64, int cx, int cy) {
        Tensor<float> rgb = crop_with_zero_pad(img64, cx, cy, 24);
        Tensor<float> heat = crop_with_zero_pad(heat64, cx, cy, 24);
        Tensor<float> patch({4, 24, 24});
        std::copy(rgb.data.begin(), rgb.data.end(), patch.data.begin());
        std::copy(heat.data.begin(), heat.data.end(), patch.data.begin() + 3 * 24 * 24);
        return patch;
    };

    for (int i = 0; i < config.branch_positives; ++i) {
        const int fi = rng.next_int(face_lo, face_hi - 1);
        const auto& ex = dataset.faces[static_cast<size_t>(fi)];

        std::vector<int> visible;
        for (int k = 0; k < dataset.k_types; ++k)
            if (ex.face.landmarks[static_cast<size_t>(k)].visible) visible.push_back(k);
        if (visible.empty()) {
            --i;  // face fully occluded; resample
            continue;
        }
        const int k = visible[static_cast<size_t>(rng.next_below(visible.size()))];

        const Tensor<float>& map32 = coarse.face_map(dataset, fi);
        Tensor<float> img64 = detail::resize_crop(ex.image, ex.face.box, 64);
        Tensor<float> heat64 = bilinear_resize(extract_channel(map32, k), 64, 64);

        const Landmark& lm = ex.face.landmarks[static_cast<size_t>(k)];
        const double gx = (lm.x - ex.face.box.x) * 64.0 / ex.face.box.w;
        const double gy = (lm.y - ex.face.box.y) * 64.0 / ex.face.box.h;
        const int cx = static_cast<int>(std::lround(gx)) +
                       rng.next_int(-config.jitter_px, config.jitter_px);
        const int cy = static_cast<int>(std::lround(gy)) +
                       rng.next_int(-config.jitter_px, config.jitter_px);

        BranchSample sample;
        sample.positive = true;
        sample.branch = k;
        sample.patch = make_patch(img64, heat64, cx, cy);
        LandmarkSet one = {{gx - (cx - 12), gy - (cy - 12), true}};
        sample.gt = render_ground_truth<float>(one, 24, 24, radius);
        sample.mask_seed = rng.next_u64();
        sample.mask =
            build_selection_mask(sample.gt, sample.mask_seed, config.negative_only_fraction);
        batch.push_back(std::move(sample));
    }

    for (int i = 0; i < config.branch_negatives; ++i) {
        const Image& bg =
            dataset.backgrounds[static_cast<size_t>(rng.next_below(dataset.backgrounds.size()))];
        const int max_side = std::min(bg.dim(1), bg.dim(2));
        const int side = rng.next_int(std::min(32, max_side), max_side);
        const int x0 = rng.next_int(0, bg.dim(2) - side);
        const int y0 = rng.next_int(0, bg.dim(1) - side);
        Tensor<float> crop32 = bilinear_resize(crop_rect_zero_pad(bg, x0, y0, side, side), 32, 32);
        Tensor<float> map32 = backbone_forward(coarse.backbone(), crop32);
        const int k = rng.next_int(0, dataset.k_types - 1);
        Tensor<float> img64 = bilinear_resize(crop32, 64, 64);
        Tensor<float> heat64 = bilinear_resize(extract_channel(map32, k), 64, 64);

        BranchSample sample;
        sample.positive = false;
        sample.branch = k;
        sample.patch = make_patch(img64, heat64, rng.next_int(0, 63), rng.next_int(0, 63));
        sample.gt = Tensor<float>({1, 24, 24});
        sample.mask_seed = rng.next_u64();
        sample.mask =
            build_selection_mask(sample.gt, sample.mask_seed, config.negative_only_fraction);
        batch.push_back(std::move(sample));
    }
    return batch;
}

/// Random-negatives until the validation loss stagnates for `patience`
/// checks, then hard negatives, permanently.
struct MiningState {
    double best_validation_loss = std::numeric_limits<double>::infinity();
    int stagnant_checks = 0;
    bool hard_negatives = false;
};

inline MiningState update_mining(MiningState state, double validation_loss, int patience) {
    if (state.hard_negatives) return state;
    if (validation_loss < state.best_validation_loss) {
        state.best_validation_loss = validation_loss;
        state.stagnant_checks = 0;
    } else {
        ++state.stagnant_checks;
        if (state.stagnant_checks >= patience) state.hard_negatives = true;
    }
    return state;
}

/// One backbone SGD step over a batch. In hard-negative mode the negative
/// selections of positive samples are rebuilt from the current predictions.
/// Returns the batch loss (selected-sum per sample, averaged over samples).
inline double train_backbone_step(BackboneWeights& backbone,
                                  std::vector<BackboneSample>& batch, float lr,
                                  const TrainConfig& config, bool hard_negatives,
                                  bool apply_update = true) {
    NetGrads grads = NetGrads::zeros_like(backbone.net);
    const float inv_b = 1.0f / static_cast<float>(batch.size());
    double total_loss = 0.0;

    for (auto& sample : batch) {
        ForwardCache cache;
        Tensor<float> pred = backbone_forward(backbone, sample.input, &cache);
        if (hard_negatives && sample.positive) {
            for (size_t k = 0; k < sample.masks.size(); ++k) {
                Tensor<float> pk = extract_channel(pred, static_cast<int>(k));
                sample.masks[k] = build_selection_mask(
                    extract_channel(sample.gt, static_cast<int>(k)), sample.mask_seeds[k],
                    config.negative_only_fraction, &pk);
            }
        }
        auto [loss, grad] = masked_mse_loss(pred, sample.gt, sample.masks);
        total_loss += loss;
        if (!apply_update) continue;
        for (float& g : grad.data) g *= inv_b;
        net_backward(backbone.net, cache, grad, grads);
    }

    const double batch_loss = total_loss / static_cast<double>(batch.size());
    if (!std::isfinite(batch_loss) || batch_loss > config.divergence_limit)
        throw NumericError("backbone training diverged (loss " + std::to_string(batch_loss) + ")");
    if (apply_update)
        net_sgd_step(backbone.net, grads, lr, config.momentum, config.weight_decay);
    return batch_loss;
}

/// One SGD step over a branch batch; every branch is updated, patches route
/// gradients only to their own subnet.
inline double train_branch_step(BranchWeights& branches, std::vector<BranchSample>& batch,
                                float lr, const TrainConfig& config, bool hard_negatives,
                                bool apply_update = true) {
    std::vector<NetGrads> grads;
    for (const auto& b : branches.branches) grads.push_back(NetGrads::zeros_like(b));
    const float inv_b = 1.0f / static_cast<float>(batch.size());
    double total_loss = 0.0;

    for (auto& sample : batch) {
        ForwardCache cache;
        Tensor<float> pred = branch_forward(branches, sample.branch, sample.patch, &cache);
        if (hard_negatives && sample.positive) {
            sample.mask = build_selection_mask(sample.gt, sample.mask_seed,
                                               config.negative_only_fraction, &pred);
        }
        std::vector<SelectionMask> masks = {sample.mask};
        auto [loss, grad] = masked_mse_loss(pred, sample.gt, masks);
        total_loss += loss;
        if (!apply_update) continue;
        for (float& g : grad.data) g *= inv_b;
        net_backward(branches.branches[static_cast<size_t>(sample.branch)], cache, grad,
                     grads[static_cast<size_t>(sample.branch)]);
    }

    const double batch_loss = total_loss / static_cast<double>(batch.size());
    if (!std::isfinite(batch_loss) || batch_loss > config.divergence_limit)
        throw NumericError("branch training diverged (loss " + std::to_string(batch_loss) + ")");
    if (apply_update)
        for (size_t k = 0; k < branches.branches.size(); ++k)
            net_sgd_step(branches.branches[k], grads[k], lr, config.momentum,
                         config.weight_decay);
    return batch_loss;
}

struct TrainState {
    int64_t iteration = 0;
    Rng rng;
    MiningState mining;
};

struct TrainHistory {
    std::vector<double> batch_loss;
    std::vector<std::pair<int64_t, double>> validation_loss;
};

namespace detail {

// 90/10 face split for train/validation; tiny datasets use everything twice
inline std::pair<int, int> train_val_split(const TrainDataset& ds) {
    const int n = static_cast<int>(ds.faces.size());
    const int train_hi = n >= 10 ? n - n / 10 : n;
    return {train_hi, n};
}

}  // namespace detail

/// Full backbone loop: schedule, periodic validation on held-out faces,
/// mining updates. Resumable: pass the state captured at a checkpoint.
inline void run_backbone_training(BackboneWeights& backbone, const TrainDataset& dataset,
                                  const TrainConfig& config, int64_t total_iterations,
                                  TrainState& state, TrainHistory* history = nullptr) {
    auto [train_hi, n] = detail::train_val_split(dataset);
    const int val_lo = train_hi < n ? train_hi : 0;

    for (; state.iteration < total_iterations; ++state.iteration) {
        auto batch = sample_backbone_batch(dataset, config, state.rng, 0, train_hi);
        const float lr = lr_at(config.backbone_schedule, state.iteration);
        const double loss = train_backbone_step(backbone, batch, lr, config,
                                                state.mining.hard_negatives);
        if (history) history->batch_loss.push_back(loss);

        if ((state.iteration + 1) % config.validation_interval == 0) {
            Rng val_rng(config.seed ^ 0x76616cULL);
            auto val_batch = sample_backbone_batch(dataset, config, val_rng, val_lo, n);
            const double val_loss = train_backbone_step(backbone, val_batch, 0.0f, config,
                                                        state.mining.hard_negatives, false);
            state.mining = update_mining(state.mining, val_loss, config.mining_patience);
            if (history) history->validation_loss.emplace_back(state.iteration + 1, val_loss);
        }
    }
}

/// Full branch loop against a frozen backbone.
inline void run_branch_training(BranchWeights& branches, const BackboneWeights& backbone,
                                const TrainDataset& dataset, const TrainConfig& config,
                                int64_t total_iterations, TrainState& state,
                                TrainHistory* history = nullptr) {
    auto [train_hi, n] = detail::train_val_split(dataset);
    const int val_lo = train_hi < n ? train_hi : 0;
    CoarseMapCache coarse(backbone);

    for (; state.iteration < total_iterations; ++state.iteration) {
        auto batch = sample_branch_batch(dataset, config, coarse, state.rng, 0, train_hi);
        const float lr = lr_at(config.branch_schedule, state.iteration);
        const double loss =
            train_branch_step(branches, batch, lr, config, state.mining.hard_negatives);
        if (history) history->batch_loss.push_back(loss);

        if ((state.iteration + 1) % config.validation_interval == 0) {
            Rng val_rng(config.seed ^ 0x76616c62ULL);
            auto val_batch = sample_branch_batch(dataset, config, coarse, val_rng, val_lo, n);
            const double val_loss = train_branch_step(branches, val_batch, 0.0f, config,
                                                      state.mining.hard_negatives, false);
            state.mining = update_mining(state.mining, val_loss, config.mining_patience);
            if (history) history->validation_loss.emplace_back(state.iteration + 1, val_loss);
        }
    }
}

/// Checkpoint = weight file + sidecar text with iteration, RNG and mining
/// state, enough to continue bit-identically.
inline void save_checkpoint(const std::string& weight_path, const BackboneWeights& backbone,
                            const BranchWeights& branches, const NetworkConfig& net_config,
                            const TrainState& state) {
    save_weights_file(weight_path, backbone, branches, net_config);
    std::ofstream meta(weight_path + ".meta", std::ios::trunc);
    if (!meta) throw DataError("cannot write checkpoint sidecar: " + weight_path + ".meta");
    meta << "iteration=" << state.iteration << "\n";
    meta << "rng=" << state.rng.save_state() << "\n";
    meta << "mining_best=" << std::hexfloat << state.mining.best_validation_loss << "\n";
    meta << "mining_stagnant=" << state.mining.stagnant_checks << "\n";
    meta << "mining_hard=" << (state.mining.hard_negatives ? 1 : 0) << "\n";
}

inline TrainState load_checkpoint_state(const std::string& weight_path) {
    std::ifstream meta(weight_path + ".meta");
    if (!meta) throw DataError("cannot read checkpoint sidecar: " + weight_path + ".meta");
    TrainState state;
    std::string line;
    while (std::getline(meta, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "iteration") state.iteration = std::stoll(value);
        else if (key == "rng") {
            if (!state.rng.load_state(value))
                throw FormatError("checkpoint sidecar has an invalid RNG state");
        } else if (key == "mining_best") state.mining.best_validation_loss = std::strtod(value.c_str(), nullptr);
        else if (key == "mining_stagnant") state.mining.stagnant_checks = std::stoi(value);
        else if (key == "mining_hard") state.mining.hard_negatives = value == "1";
    }
    return state;
}

}  // namespace bbfcn
