#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bbfcn/layers.hpp"
#include "bbfcn/rng.hpp"
#include "bbfcn/tensor.hpp"

// The backbone and branch network definitions:
//   backbone: C(20,5x5x3)-C(20,5x5x20)-MP-C(30,5x5x20)-C(30,5x5x30)-MP-
//             C(40,5x5x30)-C(40,5x5x40)-D(30,2x2x40)-C(30,5x5x30)-
//             D(15,2x2x30)-C(K,1x1x15)
//   branch:   C(5,5x5x4)-C(5,5x5x5)-C(5,5x5x5)-C(5,5x5x5)-C(1,1x1x5)
// Convolutions are same-padded stride 1, deconvolutions are 2x2 stride 2.
// ReLU follows every conv/deconv except the final 1x1 prediction layer,
// which stays linear.

namespace bbfcn {

struct NetworkConfig {
    int landmark_types = 5;  // K
    std::vector<std::string> landmark_names = {"LE", "RE", "N", "LM", "RM"};
    int backbone_input_side = 32;
    int branch_patch_side = 24;
    int magnified_side = 64;
};

enum class LayerKind : uint8_t { Conv, Deconv, MaxPool };

struct LayerSpec {
    LayerKind kind;
    int out_channels = 0;
    int in_channels = 0;
    int kernel = 0;  // spatial kernel side; 2 for deconv
    bool relu_after = false;

    int padding() const { return kind == LayerKind::Conv ? kernel / 2 : 0; }
};

/// Parameters of one layer plus its momentum buffers. Max-pool layers carry
/// empty tensors. Deconv layers have no bias.
struct LayerParams {
    Tensor<float> weights;
    Tensor<float> bias;
    Tensor<float> weight_momentum;
    Tensor<float> bias_momentum;
};

struct Net {
    std::vector<LayerSpec> spec;
    std::vector<LayerParams> params;
};

inline std::vector<LayerSpec> backbone_spec(int k_types) {
    auto C = [](int o, int c, int k, bool relu) {
        return LayerSpec{LayerKind::Conv, o, c, k, relu};
    };
    auto D = [](int o, int c) { return LayerSpec{LayerKind::Deconv, o, c, 2, true}; };
    auto MP = [] { return LayerSpec{LayerKind::MaxPool, 0, 0, 2, false}; };
    return {
        C(20, 3, 5, true),  C(20, 20, 5, true), MP(),
        C(30, 20, 5, true), C(30, 30, 5, true), MP(),
        C(40, 30, 5, true), C(40, 40, 5, true),
        D(30, 40),          C(30, 30, 5, true),
        D(15, 30),          C(k_types, 15, 1, false),
    };
}

inline std::vector<LayerSpec> branch_spec() {
    auto C = [](int o, int c, int k, bool relu) {
        return LayerSpec{LayerKind::Conv, o, c, k, relu};
    };
    return {C(5, 4, 5, true), C(5, 5, 5, true), C(5, 5, 5, true), C(5, 5, 5, true),
            C(1, 5, 1, false)};
}

/// Backbone parameters: the full ordered layer listing with momentum buffers.
struct BackboneWeights {
    Net net;
};

/// K structurally identical, independently parameterized branch refiners.
struct BranchWeights {
    std::vector<Net> branches;
};

namespace detail {

inline void init_layer(const LayerSpec& spec, LayerParams& p, Rng& rng, double stddev) {
    if (spec.kind == LayerKind::MaxPool) return;
    if (spec.kind == LayerKind::Conv) {
        p.weights = Tensor<float>({spec.out_channels, spec.in_channels, spec.kernel, spec.kernel});
        p.bias = Tensor<float>({spec.out_channels});
    } else {
        p.weights = Tensor<float>({spec.in_channels, spec.out_channels, 2, 2});
    }
    for (float& v : p.weights.data) v = static_cast<float>(rng.gaussian(0.0, stddev));
    p.weight_momentum = Tensor<float>(p.weights.shape);
    if (p.bias.size() > 0) p.bias_momentum = Tensor<float>(p.bias.shape);
}

inline Net make_net(std::vector<LayerSpec> spec, Rng& rng, double stddev) {
    Net net;
    net.spec = std::move(spec);
    net.params.resize(net.spec.size());
    for (size_t i = 0; i < net.spec.size(); ++i) init_layer(net.spec[i], net.params[i], rng, stddev);
    return net;
}

}  // namespace detail

/// Zero-mean Gaussian kernels, zero biases, zero momentum; fully
/// deterministic for a given seed. The default stddevs are near unit gain for
/// each stack's fan-in (5x5x20 backbone taps, 5x5x5 branch taps): with a much
/// smaller scale the deep backbone collapses onto the constant predictor and
/// stays there for thousands of iterations at the pinned learning rates,
/// which no desk-scale run can afford.
inline std::pair<BackboneWeights, BranchWeights> init_weights(const NetworkConfig& config,
                                                              uint64_t seed,
                                                              double backbone_stddev = 0.05,
                                                              double branch_stddev = 0.09) {
    Rng rng(seed);
    BackboneWeights backbone{
        detail::make_net(backbone_spec(config.landmark_types), rng, backbone_stddev)};
    BranchWeights branches;
    branches.branches.reserve(static_cast<size_t>(config.landmark_types));
    for (int k = 0; k < config.landmark_types; ++k)
        branches.branches.push_back(detail::make_net(branch_spec(), rng, branch_stddev));
    return {std::move(backbone), std::move(branches)};
}

inline int64_t param_count(const Net& net) {
    int64_t n = 0;
    for (const auto& p : net.params) n += p.weights.size() + p.bias.size();
    return n;
}

/// Activation record of one forward pass, consumed by net_backward.
struct ForwardCache {
    std::vector<Tensor<float>> inputs;    // input to each layer
    std::vector<Tensor<float>> preact;    // pre-ReLU outputs
    std::vector<Tensor<int>> pool_argmax; // per layer, empty unless MaxPool
    Tensor<float> output;
};

inline Tensor<float> apply_layer(const LayerSpec& spec, const LayerParams& p,
                                 const Tensor<float>& x, Tensor<int>* argmax_out) {
    switch (spec.kind) {
        case LayerKind::Conv:
            return conv2d(x, p.weights, p.bias, {spec.padding(), spec.padding()});
        case LayerKind::Deconv:
            return deconv2d(x, p.weights);
        case LayerKind::MaxPool: {
            auto [out, arg] = maxpool2(x);
            if (argmax_out) *argmax_out = std::move(arg);
            return std::move(out);
        }
    }
    throw ContractViolation("unknown layer kind");
}

inline Tensor<float> net_forward(const Net& net, const Tensor<float>& input,
                                 ForwardCache* cache = nullptr) {
    Tensor<float> x = input;
    if (cache) {
        cache->inputs.clear();
        cache->preact.clear();
        cache->pool_argmax.assign(net.spec.size(), Tensor<int>());
    }
    for (size_t i = 0; i < net.spec.size(); ++i) {
        const LayerSpec& spec = net.spec[i];
        const Tensor<float>* xin = &x;
        if (cache) {
            cache->inputs.push_back(std::move(x));
            xin = &cache->inputs.back();
        }
        Tensor<float> y =
            apply_layer(spec, net.params[i], *xin, cache ? &cache->pool_argmax[i] : nullptr);
        if (cache) {
            cache->preact.push_back(std::move(y));
            x = spec.relu_after ? relu(cache->preact.back()) : cache->preact.back();
        } else {
            x = spec.relu_after ? relu(y) : std::move(y);
        }
    }
    if (cache) cache->output = x;
    return x;
}

/// Per-layer parameter gradients, shape-congruent to Net::params.
struct NetGrads {
    std::vector<Tensor<float>> weight_grads;
    std::vector<Tensor<float>> bias_grads;

    static NetGrads zeros_like(const Net& net) {
        NetGrads g;
        for (const auto& p : net.params) {
            g.weight_grads.push_back(p.weights.size() > 0 ? Tensor<float>(p.weights.shape)
                                                          : Tensor<float>());
            g.bias_grads.push_back(p.bias.size() > 0 ? Tensor<float>(p.bias.shape)
                                                     : Tensor<float>());
        }
        return g;
    }

    void add(const NetGrads& other) {
        for (size_t i = 0; i < weight_grads.size(); ++i) {
            for (int64_t j = 0; j < weight_grads[i].size(); ++j)
                weight_grads[i].data[static_cast<size_t>(j)] +=
                    other.weight_grads[i].data[static_cast<size_t>(j)];
            for (int64_t j = 0; j < bias_grads[i].size(); ++j)
                bias_grads[i].data[static_cast<size_t>(j)] +=
                    other.bias_grads[i].data[static_cast<size_t>(j)];
        }
    }
};

/// Backpropagates out_grad through a cached forward pass, accumulating
/// parameter gradients into `grads`. Returns the gradient wrt the net input.
inline Tensor<float> net_backward(const Net& net, const ForwardCache& cache,
                                  const Tensor<float>& out_grad, NetGrads& grads) {
    Tensor<float> g = out_grad;
    for (int i = static_cast<int>(net.spec.size()) - 1; i >= 0; --i) {
        const LayerSpec& spec = net.spec[static_cast<size_t>(i)];
        const LayerParams& p = net.params[static_cast<size_t>(i)];
        const Tensor<float>& x = cache.inputs[static_cast<size_t>(i)];
        if (spec.relu_after) g = relu_backward(cache.preact[static_cast<size_t>(i)], g);
        switch (spec.kind) {
            case LayerKind::Conv: {
                g = conv2d_backward_acc(x, p.weights, g, {spec.padding(), spec.padding()}, i > 0,
                                        grads.weight_grads[static_cast<size_t>(i)],
                                        grads.bias_grads[static_cast<size_t>(i)]);
                break;
            }
            case LayerKind::Deconv: {
                LayerGrad<float> lg = deconv2d_backward(x, p.weights, g);
                for (int64_t j = 0; j < lg.weight_grad.size(); ++j)
                    grads.weight_grads[static_cast<size_t>(i)].data[static_cast<size_t>(j)] +=
                        lg.weight_grad.data[static_cast<size_t>(j)];
                g = std::move(lg.input_grad);
                break;
            }
            case LayerKind::MaxPool:
                g = maxpool2_backward(cache.pool_argmax[static_cast<size_t>(i)], g, x.shape);
                break;
        }
    }
    return g;
}

/// Coarse heat map H^k at input resolution; fully convolutional, any H and W
/// divisible by 4 (two pooling stages) are admissible. Image values must be
/// normalized to [0,1].
inline Tensor<float> backbone_forward(const BackboneWeights& weights, const Tensor<float>& image,
                                      ForwardCache* cache = nullptr) {
    require(image.rank() == 3 && image.dim(0) == 3, "backbone: input must be 3 x H x W");
    require(image.dim(1) % 4 == 0 && image.dim(2) % 4 == 0,
            "backbone: spatial dims must be divisible by 4");
    return net_forward(weights.net, image, cache);
}

/// Fine map M_f^k for one 4-channel patch (RGB + coarse heat channel k).
inline Tensor<float> branch_forward(const BranchWeights& weights, int k, const Tensor<float>& patch,
                                    ForwardCache* cache = nullptr) {
    require(k >= 0 && k < static_cast<int>(weights.branches.size()), "branch: bad type index");
    require(patch.rank() == 3 && patch.dim(0) == 4, "branch: patch must be 4 x H x W");
    return net_forward(weights.branches[static_cast<size_t>(k)], patch, cache);
}

/// One SGD-with-momentum update over every parameter of a net.
inline void net_sgd_step(Net& net, const NetGrads& grads, float lr, float momentum,
                         float weight_decay) {
    for (size_t i = 0; i < net.params.size(); ++i) {
        LayerParams& p = net.params[i];
        if (p.weights.size() == 0) continue;
        sgd_step(p.weights, grads.weight_grads[i], p.weight_momentum, lr, momentum, weight_decay);
        if (p.bias.size() > 0)
            sgd_step(p.bias, grads.bias_grads[i], p.bias_momentum, lr, momentum, weight_decay);
    }
}

}  // namespace bbfcn
