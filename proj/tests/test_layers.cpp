#include <catch2/catch_amalgamated.hpp>

#include "bbfcn/layers.hpp"
#include "bbfcn/rng.hpp"

using namespace bbfcn;

namespace {

// Independent direct convolution oracle: plain nested loops, no reuse of the
// library's traversal order.
Tensor<float> conv_oracle(const Tensor<float>& in, const Tensor<float>& w, const Tensor<float>& b,
                          int py, int px) {
    const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
    const int O = w.dim(0), Kh = w.dim(2), Kw = w.dim(3);
    Tensor<float> out({O, H + 2 * py - Kh + 1, W + 2 * px - Kw + 1});
    for (int o = 0; o < O; ++o)
        for (int y = 0; y < out.dim(1); ++y)
            for (int x = 0; x < out.dim(2); ++x) {
                float acc = b.data[static_cast<size_t>(o)];
                for (int c = 0; c < C; ++c)
                    for (int ky = 0; ky < Kh; ++ky)
                        for (int kx = 0; kx < Kw; ++kx) {
                            const int iy = y + ky - py, ix = x + kx - px;
                            if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                acc += in.at(c, iy, ix) *
                                       w.data[((static_cast<size_t>(o) * C + c) * Kh + ky) * Kw +
                                              kx];
                        }
                out.at(o, y, x) = acc;
            }
    return out;
}

Tensor<float> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<float> t(std::move(shape));
    for (float& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

}  // namespace

TEST_CASE("conv2d identity kernel") {
    Tensor<float> in({1, 1, 1}, {3.0f});
    Tensor<float> w({1, 1, 1, 1}, {1.0f});
    Tensor<float> b({1}, {0.0f});
    auto out = conv2d(in, w, b, {0, 0});
    REQUIRE(out.shape == std::vector<int>{1, 1, 1});
    REQUIRE(out.data[0] == 3.0f);
}

TEST_CASE("conv2d all-ones 3x3 same padding") {
    Tensor<float> in({1, 3, 3});
    in.fill(1.0f);
    Tensor<float> w({1, 1, 3, 3});
    w.fill(1.0f);
    Tensor<float> b({1});
    auto out = conv2d(in, w, b, {1, 1});
    REQUIRE(out.at(0, 1, 1) == 9.0f);
    REQUIRE(out.at(0, 0, 1) == 6.0f);
    REQUIRE(out.at(0, 1, 0) == 6.0f);
    REQUIRE(out.at(0, 0, 0) == 4.0f);
    REQUIRE(out.at(0, 2, 2) == 4.0f);
}

TEST_CASE("conv2d matches direct oracle on random cases") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const int C = rng.next_int(1, 3), O = rng.next_int(1, 4);
        const int H = rng.next_int(3, 8), W = rng.next_int(3, 8);
        const int K = 2 * rng.next_int(0, 2) + 1;  // 1, 3 or 5
        auto in = random_tensor({C, H, W}, rng);
        auto w = random_tensor({O, C, K, K}, rng);
        auto b = random_tensor({O}, rng);
        auto got = conv2d(in, w, b, {K / 2, K / 2});
        auto want = conv_oracle(in, w, b, K / 2, K / 2);
        REQUIRE(got.shape == want.shape);
        for (int64_t i = 0; i < got.size(); ++i)
            REQUIRE_THAT(got.data[static_cast<size_t>(i)],
                         Catch::Matchers::WithinAbs(want.data[static_cast<size_t>(i)], 1e-4));
    }
}

TEST_CASE("conv2d centered one-hot kernel reproduces interior pixels") {
    Rng rng(5);
    auto in = random_tensor({2, 7, 7}, rng);
    Tensor<float> w({2, 2, 3, 3});
    // identity: kernel (o == c) has a single 1 at the center
    for (int o = 0; o < 2; ++o)
        w.data[((static_cast<size_t>(o) * 2 + o) * 3 + 1) * 3 + 1] = 1.0f;
    Tensor<float> b({2});
    auto out = conv2d(in, w, b, {1, 1});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 7; ++y)
            for (int x = 0; x < 7; ++x) REQUIRE(out.at(c, y, x) == in.at(c, y, x));
}

TEST_CASE("conv2d error paths") {
    Tensor<float> in({2, 4, 4});
    Tensor<float> w({1, 3, 3, 3});  // channel mismatch
    Tensor<float> b({1});
    REQUIRE_THROWS_AS(conv2d(in, w, b, {1, 1}), ContractViolation);

    Tensor<float> w2({1, 2, 3, 3});
    Tensor<float> bad = in;
    bad.data[0] = std::numeric_limits<float>::quiet_NaN();
    REQUIRE_THROWS_AS(conv2d(bad, w2, b, {1, 1}), NumericError);
}

TEST_CASE("deconv2d scatters disjoint 2x2 blocks") {
    Tensor<float> in({1, 2, 2}, {1, 2, 3, 4});
    Tensor<float> w({1, 1, 2, 2});
    w.fill(1.0f);
    auto out = deconv2d(in, w);
    REQUIRE(out.shape == std::vector<int>{1, 4, 4});
    const float want[4][4] = {{1, 1, 2, 2}, {1, 1, 2, 2}, {3, 3, 4, 4}, {3, 3, 4, 4}};
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) REQUIRE(out.at(0, y, x) == want[y][x]);
}

TEST_CASE("deconv2d output doubles spatial dims") {
    Rng rng(3);
    auto in = random_tensor({3, 5, 7}, rng);
    auto w = random_tensor({3, 2, 2, 2}, rng);
    auto out = deconv2d(in, w);
    REQUIRE(out.shape == std::vector<int>{2, 10, 14});
}

TEST_CASE("deconv2d blocks are disjoint") {
    Rng rng(7);
    auto in = random_tensor({2, 3, 3}, rng);
    auto w = random_tensor({2, 2, 2, 2}, rng);
    auto base = deconv2d(in, w);

    auto zeroed = in;
    for (int c = 0; c < 2; ++c) zeroed.at(c, 1, 2) = 0.0f;
    auto out = deconv2d(zeroed, w);
    for (int o = 0; o < 2; ++o)
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 6; ++x) {
                const bool in_block = (y / 2 == 1) && (x / 2 == 2);
                if (in_block)
                    REQUIRE(out.at(o, y, x) == 0.0f);
                else
                    REQUIRE(out.at(o, y, x) == base.at(o, y, x));
            }
}

TEST_CASE("maxpool2 basics and backward routing") {
    Tensor<float> in({1, 2, 2}, {1, 2, 3, 4});
    auto [out, arg] = maxpool2(in);
    REQUIRE(out.shape == std::vector<int>{1, 1, 1});
    REQUIRE(out.data[0] == 4.0f);

    Tensor<float> up({1, 1, 1}, {1.0f});
    auto din = maxpool2_backward(arg, up, {1, 2, 2});
    REQUIRE(din.data == std::vector<float>{0, 0, 0, 1});
}

TEST_CASE("maxpool2 tie breaks to row-major-first element") {
    Tensor<float> in({1, 2, 2});
    in.fill(7.0f);
    auto [out, arg] = maxpool2(in);
    REQUIRE(arg.data[0] == 0);
}

TEST_CASE("maxpool2 shape and error") {
    Tensor<float> in({3, 8, 8});
    auto [out, arg] = maxpool2(in);
    REQUIRE(out.shape == std::vector<int>{3, 4, 4});
    Tensor<float> odd({1, 3, 4});
    REQUIRE_THROWS_AS(maxpool2(odd), ContractViolation);
}

TEST_CASE("maxpool2 backward conserves gradient mass") {
    Rng rng(23);
    for (int trial = 0; trial < 20; ++trial) {
        auto in = random_tensor({2, 6, 8}, rng);
        auto [out, arg] = maxpool2(in);
        auto up = random_tensor(out.shape, rng);
        auto din = maxpool2_backward(arg, up, in.shape);
        double up_sum = 0, din_sum = 0;
        for (float v : up.data) up_sum += v;
        for (float v : din.data) din_sum += v;
        REQUIRE_THAT(din_sum, Catch::Matchers::WithinAbs(up_sum, 1e-4));
    }
}

TEST_CASE("relu forward and subgradient") {
    Tensor<float> in({1, 1, 3}, {-1, 0, 2});
    auto out = relu(in);
    REQUIRE(out.data == std::vector<float>{0, 0, 2});

    Tensor<float> up({1, 1, 3}, {1, 1, 1});
    auto din = relu_backward(in, up);
    REQUIRE(din.data == std::vector<float>{0, 0, 1});

    Tensor<float> pos({1, 1, 3}, {1, 2, 3});
    REQUIRE(relu(pos).data == pos.data);
}

TEST_CASE("bilinear_resize identity, constant, broadcast") {
    Rng rng(9);
    auto in = random_tensor({3, 5, 6}, rng);
    auto same = bilinear_resize(in, 5, 6);
    REQUIRE(same.data == in.data);

    Tensor<float> constant({2, 4, 4});
    constant.fill(0.37f);
    auto big = bilinear_resize(constant, 9, 11);
    for (float v : big.data) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.37, 1e-6));

    Tensor<float> single({1, 1, 1}, {5.0f});
    auto spread = bilinear_resize(single, 4, 4);
    for (float v : spread.data) REQUIRE(v == 5.0f);

    REQUIRE_THROWS_AS(bilinear_resize(in, 0, 4), ContractViolation);
}

TEST_CASE("sgd_step update rule") {
    Tensor<float> w({1}, {1.0f}), g({1}, {2.0f}), v({1});
    sgd_step(w, g, v, 0.1f, 0.0f, 0.0f);
    REQUIRE_THAT(w.data[0], Catch::Matchers::WithinAbs(0.8, 1e-7));

    // momentum recurrence: v = -0.1 then -0.19, w ends at -0.29
    Tensor<float> w2({1}), g2({1}, {1.0f}), v2({1});
    sgd_step(w2, g2, v2, 0.1f, 0.9f, 0.0f);
    REQUIRE_THAT(v2.data[0], Catch::Matchers::WithinAbs(-0.1, 1e-7));
    sgd_step(w2, g2, v2, 0.1f, 0.9f, 0.0f);
    REQUIRE_THAT(v2.data[0], Catch::Matchers::WithinAbs(-0.19, 1e-7));
    REQUIRE_THAT(w2.data[0], Catch::Matchers::WithinAbs(-0.29, 1e-7));

    // pure weight decay
    Tensor<float> w3({1}, {2.0f}), g3({1}), v3({1});
    sgd_step(w3, g3, v3, 1.0f, 0.0f, 0.0005f);
    REQUIRE_THAT(w3.data[0], Catch::Matchers::WithinAbs(1.999, 1e-6));

    Tensor<float> mismatched({2});
    REQUIRE_THROWS_AS(sgd_step(w3, mismatched, v3, 0.1f, 0.0f, 0.0f), ContractViolation);
}

TEST_CASE("ops are deterministic") {
    Rng rng(41);
    auto in = random_tensor({3, 8, 8}, rng);
    auto w = random_tensor({4, 3, 5, 5}, rng);
    auto b = random_tensor({4}, rng);
    auto a = conv2d(in, w, b, {2, 2});
    auto c = conv2d(in, w, b, {2, 2});
    REQUIRE(a.data == c.data);
}
