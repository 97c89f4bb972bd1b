#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "bbfcn/heatmap.hpp"

using namespace bbfcn;

namespace {

// enumeration oracle for clipped discs
int disc_count_oracle(double cx, double cy, int radius, int h, int w) {
    int n = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius) ++n;
    return n;
}

int count_ones(const Tensor<float>& map, int k) {
    int n = 0;
    for (int y = 0; y < map.dim(1); ++y)
        for (int x = 0; x < map.dim(2); ++x)
            if (map.at(k, y, x) == 1.0f) ++n;
    return n;
}

}  // namespace

TEST_CASE("radius-2 interior disc has exactly 13 pixels") {
    LandmarkSet lms = {{10.0, 10.0, true}};
    auto map = render_ground_truth(lms, 32, 32, 2);
    REQUIRE(count_ones(map, 0) == 13);
    REQUIRE(disc_pixel_count(2) == 13);
}

TEST_CASE("corner-clipped disc matches the enumeration oracle") {
    LandmarkSet lms = {{0.0, 0.0, true}};
    auto map = render_ground_truth(lms, 32, 32, 2);
    REQUIRE(count_ones(map, 0) == 6);
    REQUIRE(count_ones(map, 0) == disc_count_oracle(0, 0, 2, 32, 32));

    LandmarkSet edge = {{31.0, 15.5, true}};
    auto edge_map = render_ground_truth(edge, 32, 32, 2);
    REQUIRE(count_ones(edge_map, 0) == disc_count_oracle(31.0, 15.5, 2, 32, 32));
}

TEST_CASE("invisible landmarks render nothing") {
    LandmarkSet lms = {{10.0, 10.0, false}};
    auto map = render_ground_truth(lms, 32, 32, 2);
    for (float v : map.data) REQUIRE(v == 0.0f);
}

TEST_CASE("disc radii follow the width fractions") {
    REQUIRE(disc_radius(32, 0.05) == 2);
    REQUIRE(disc_radius(64, 0.03) == 2);
}

TEST_CASE("decode_top_n_average centroids") {
    LandmarkSet lms = {{10.0, 10.0, true}};
    auto map = render_ground_truth(lms, 32, 32, 2);
    auto p = decode_top_n_average(map, 13);
    REQUIRE_THAT(p.x, Catch::Matchers::WithinAbs(10.0, 1e-12));
    REQUIRE_THAT(p.y, Catch::Matchers::WithinAbs(10.0, 1e-12));

    Tensor<float> single({1, 16, 16});
    single.at(0, 5, 7) = 0.9f;
    auto q = decode_top_n_average(single, 1);
    REQUIRE(q.x == 7.0);
    REQUIRE(q.y == 5.0);
}

TEST_CASE("decode tie-break on a uniform map is row-major") {
    Tensor<float> uniform({1, 32, 32});
    uniform.fill(0.5f);
    auto p = decode_top_n_average(uniform, 13);
    REQUIRE(p.x == 6.0);  // mean of x = 0..12 on row 0
    REQUIRE(p.y == 0.0);
}

TEST_CASE("decode is invariant under strictly monotone transforms") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<float> map({1, 12, 12});
        for (float& v : map.data) v = static_cast<float>(rng.uniform(-2.0, 2.0));
        auto base = decode_top_n_average(map, 7);
        Tensor<float> warped = map;
        for (float& v : warped.data) v = std::exp(0.5f * v);  // strictly increasing
        auto same = decode_top_n_average(warped, 7);
        REQUIRE(base.x == same.x);
        REQUIRE(base.y == same.y);
    }
}

TEST_CASE("selection mask balances negatives against positives") {
    LandmarkSet lms = {{10.0, 10.0, true}};
    auto gt = render_ground_truth(lms, 32, 32, 2);
    auto mask = build_selection_mask(extract_channel(gt, 0), 123, 0.01);
    REQUIRE(mask.positive_count == 13);
    REQUIRE(mask.negative_count == 13);
    int selected = 0;
    for (uint8_t v : mask.selected.data) selected += v;
    REQUIRE(selected == 26);
}

TEST_CASE("all-negative channel selects the configured fraction") {
    Tensor<float> gt({1, 32, 32});
    auto mask = build_selection_mask(gt, 9, 0.01);
    REQUIRE(mask.positive_count == 0);
    REQUIRE(mask.negative_count == 11);  // ceil(0.01 * 1024)
}

TEST_CASE("mining mode picks the highest-responding negatives") {
    LandmarkSet lms = {{10.0, 10.0, true}};
    auto gt = render_ground_truth(lms, 32, 32, 2);
    Tensor<float> pred({1, 32, 32});
    Rng rng(31);
    for (float& v : pred.data) v = static_cast<float>(rng.next_double());

    auto mask = build_selection_mask(extract_channel(gt, 0), 1, 0.01, &pred);

    // sort oracle over non-landmark locations
    std::vector<std::pair<float, int>> neg;
    for (int i = 0; i < 32 * 32; ++i)
        if (gt.data[static_cast<size_t>(i)] == 0.0f)
            neg.emplace_back(pred.data[static_cast<size_t>(i)], i);
    std::sort(neg.begin(), neg.end(), [](auto a, auto b) { return a.first > b.first; });
    std::set<int> want;
    for (int i = 0; i < 13; ++i) want.insert(neg[static_cast<size_t>(i)].second);

    for (int i = 0; i < 32 * 32; ++i) {
        const bool is_pos = gt.data[static_cast<size_t>(i)] == 1.0f;
        const bool selected = mask.selected.data[static_cast<size_t>(i)] == 1;
        if (is_pos) REQUIRE(selected);
        else REQUIRE(selected == (want.count(i) > 0));
    }
}

TEST_CASE("mask balance holds over many random configurations") {
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        LandmarkSet lms;
        const int n = rng.next_int(0, 3);
        for (int i = 0; i < n; ++i)
            lms.push_back({rng.uniform(0, 31), rng.uniform(0, 31), true});
        lms.resize(1, {0, 0, false});
        auto gt = render_ground_truth(LandmarkSet{lms[0]}, 32, 32, 2);
        auto mask = build_selection_mask(extract_channel(gt, 0), rng.next_u64(), 0.01);
        if (mask.positive_count > 0) REQUIRE(mask.negative_count == mask.positive_count);
        else REQUIRE(mask.negative_count == 11);
    }
}

TEST_CASE("masked loss value and gradient") {
    LandmarkSet lms = {{5.0, 5.0, true}};
    auto gt = render_ground_truth(lms, 16, 16, 2);
    auto mask = build_selection_mask(extract_channel(gt, 0), 3, 0.01);

    auto [zero_loss, zero_grad] = masked_mse_loss(gt, gt, {mask});
    REQUIRE(zero_loss == 0.0);
    for (float v : zero_grad.data) REQUIRE(v == 0.0f);

    // two selected locations, each off by 0.5 -> loss 0.5
    Tensor<float> pred = gt;
    int changed = 0;
    for (int i = 0; i < 16 * 16 && changed < 2; ++i) {
        if (mask.selected.data[static_cast<size_t>(i)]) {
            pred.data[static_cast<size_t>(i)] += 0.5f;
            ++changed;
        }
    }
    auto [loss, grad] = masked_mse_loss(pred, gt, {mask});
    REQUIRE_THAT(loss, Catch::Matchers::WithinAbs(0.5, 1e-6));

    // gradient is exactly zero off-mask
    for (int i = 0; i < 16 * 16; ++i)
        if (!mask.selected.data[static_cast<size_t>(i)])
            REQUIRE(grad.data[static_cast<size_t>(i)] == 0.0f);

    Tensor<float> wrong({1, 8, 8});
    REQUIRE_THROWS_AS(masked_mse_loss(pred, wrong, {mask}), ContractViolation);
}
