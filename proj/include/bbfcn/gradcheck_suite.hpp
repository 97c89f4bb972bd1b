#pragma once

#include <tuple>
#include <vector>

#include "bbfcn/gradcheck.hpp"
#include "bbfcn/heatmap.hpp"
#include "bbfcn/layers.hpp"
#include "bbfcn/rng.hpp"

// Named finite-difference checks, one per differentiable op. Each builds a
// random small case (seeded), projects the op output onto a fixed random
// direction to obtain a scalar, and returns the max relative error between
// the analytic gradient and central differences. All in 64-bit mode.

namespace bbfcn::gradcheck {

namespace detail {

inline Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

}  // namespace detail

inline double conv2d_case(uint64_t seed) {
    using detail::dot;
    Rng rng(seed);
    auto input = detail::random_tensor({2, 5, 5}, rng);
    auto weights = detail::random_tensor({3, 2, 3, 3}, rng);
    auto bias = detail::random_tensor({3}, rng);
    const std::pair<int, int> pad{1, 1};
    auto proj = detail::random_tensor(conv2d(input, weights, bias, pad).shape, rng);

    const int64_t ni = input.size(), nw = weights.size();
    std::vector<double> x;
    x.insert(x.end(), input.data.begin(), input.data.end());
    x.insert(x.end(), weights.data.begin(), weights.data.end());
    x.insert(x.end(), bias.data.begin(), bias.data.end());

    auto loss = [&](const std::vector<double>& v) {
        Tensor<double> in(input.shape), w(weights.shape), b(bias.shape);
        std::copy(v.begin(), v.begin() + ni, in.data.begin());
        std::copy(v.begin() + ni, v.begin() + ni + nw, w.data.begin());
        std::copy(v.begin() + ni + nw, v.end(), b.data.begin());
        return dot(conv2d(in, w, b, pad), proj);
    };
    LayerGrad<double> g = conv2d_backward(input, weights, proj, pad);
    std::vector<double> analytic;
    analytic.insert(analytic.end(), g.input_grad.data.begin(), g.input_grad.data.end());
    analytic.insert(analytic.end(), g.weight_grad.data.begin(), g.weight_grad.data.end());
    analytic.insert(analytic.end(), g.bias_grad.data.begin(), g.bias_grad.data.end());
    return finite_diff_check(loss, x, analytic);
}

inline double deconv2d_case(uint64_t seed) {
    using detail::dot;
    Rng rng(seed);
    auto input = detail::random_tensor({2, 3, 3}, rng);
    auto weights = detail::random_tensor({2, 2, 2, 2}, rng);
    auto proj = detail::random_tensor(deconv2d(input, weights).shape, rng);

    const int64_t ni = input.size();
    std::vector<double> x;
    x.insert(x.end(), input.data.begin(), input.data.end());
    x.insert(x.end(), weights.data.begin(), weights.data.end());
    auto loss = [&](const std::vector<double>& v) {
        Tensor<double> in(input.shape), w(weights.shape);
        std::copy(v.begin(), v.begin() + ni, in.data.begin());
        std::copy(v.begin() + ni, v.end(), w.data.begin());
        return dot(deconv2d(in, w), proj);
    };
    LayerGrad<double> g = deconv2d_backward(input, weights, proj);
    std::vector<double> analytic;
    analytic.insert(analytic.end(), g.input_grad.data.begin(), g.input_grad.data.end());
    analytic.insert(analytic.end(), g.weight_grad.data.begin(), g.weight_grad.data.end());
    return finite_diff_check(loss, x, analytic);
}

inline double maxpool2_case(uint64_t seed) {
    using detail::dot;
    Rng rng(seed);
    auto input = detail::random_tensor({2, 4, 4}, rng);
    // separate window entries so the argmax never flips under eps
    for (size_t i = 0; i < input.data.size(); ++i) input.data[i] += 1e-3 * static_cast<double>(i);
    auto [out, arg] = maxpool2(input);
    auto proj = detail::random_tensor(out.shape, rng);

    auto loss = [&](const std::vector<double>& v) {
        Tensor<double> in(input.shape);
        std::copy(v.begin(), v.end(), in.data.begin());
        auto [o, a] = maxpool2(in);
        return dot(o, proj);
    };
    auto din = maxpool2_backward(arg, proj, input.shape);
    return finite_diff_check(loss, input.data, din.data);
}

inline double relu_case(uint64_t seed) {
    using detail::dot;
    Rng rng(seed);
    Tensor<double> input({2, 3, 3});
    for (double& v : input.data) {
        v = rng.uniform(0.1, 1.0);  // away from the kink
        if (rng.next_double() < 0.5) v = -v;
    }
    auto proj = detail::random_tensor(input.shape, rng);
    auto loss = [&](const std::vector<double>& v) {
        Tensor<double> in(input.shape);
        std::copy(v.begin(), v.end(), in.data.begin());
        return dot(relu(in), proj);
    };
    auto din = relu_backward(input, proj);
    return finite_diff_check(loss, input.data, din.data);
}

/// resize-then-convolve composition, checking the input gradient end to end.
inline double bilinear_composed_case(uint64_t seed) {
    using detail::dot;
    Rng rng(seed);
    auto input = detail::random_tensor({2, 3, 3}, rng);
    auto weights = detail::random_tensor({2, 2, 3, 3}, rng);
    auto bias = detail::random_tensor({2}, rng);
    auto forward = [&](const Tensor<double>& in) {
        return conv2d(bilinear_resize(in, 6, 7), weights, bias, {1, 1});
    };
    auto proj = detail::random_tensor(forward(input).shape, rng);
    auto loss = [&](const std::vector<double>& v) {
        Tensor<double> in(input.shape);
        std::copy(v.begin(), v.end(), in.data.begin());
        return dot(forward(in), proj);
    };
    Tensor<double> resized = bilinear_resize(input, 6, 7);
    LayerGrad<double> g = conv2d_backward(resized, weights, proj, {1, 1});
    auto din = bilinear_resize_backward(input.shape, g.input_grad);
    return finite_diff_check(loss, input.data, din.data);
}

inline double masked_loss_case(uint64_t seed) {
    Rng rng(seed);
    LandmarkSet lms = {{4.0, 5.0, true}, {9.0, 3.0, true}};
    auto gt = render_ground_truth<double>(lms, 12, 12, 2);
    auto pred = detail::random_tensor(gt.shape, rng);
    std::vector<SelectionMask> masks;
    for (int k = 0; k < 2; ++k)
        masks.push_back(build_selection_mask(extract_channel(gt, k), seed + k, 0.05));

    auto loss = [&](const std::vector<double>& v) {
        Tensor<double> p(pred.shape);
        std::copy(v.begin(), v.end(), p.data.begin());
        return masked_mse_loss(p, gt, masks).first;
    };
    auto grad = masked_mse_loss(pred, gt, masks).second;
    return finite_diff_check(loss, pred.data, grad.data);
}

struct SuiteEntry {
    const char* name;
    double (*check)(uint64_t seed);
};

inline std::vector<SuiteEntry> suite() {
    return {{"conv2d", conv2d_case},
            {"deconv2d", deconv2d_case},
            {"maxpool2", maxpool2_case},
            {"relu", relu_case},
            {"bilinear_composed", bilinear_composed_case},
            {"masked_mse_loss", masked_loss_case}};
}

}  // namespace bbfcn::gradcheck
