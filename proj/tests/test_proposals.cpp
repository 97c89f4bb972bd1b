#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "bbfcn/proposals.hpp"
#include "bbfcn/rng.hpp"

using namespace bbfcn;

namespace {

// brute-force reference for the two-stage suppression
std::vector<ProposalBox> suppress_oracle(const std::vector<ProposalBox>& proposals,
                                         double iou_threshold) {
    auto greedy = [&](std::vector<ProposalBox> pool) {
        std::stable_sort(pool.begin(), pool.end(),
                         [](const ProposalBox& a, const ProposalBox& b) {
                             return a.score > b.score;
                         });
        std::vector<ProposalBox> kept;
        for (const auto& p : pool) {
            bool blocked = false;
            for (const auto& k : kept)
                if (iou(k.box, p.box) > iou_threshold) blocked = true;
            if (!blocked) kept.push_back(p);
        }
        return kept;
    };

    int max_type = -1;
    for (const auto& p : proposals) max_type = std::max(max_type, p.type);
    std::vector<ProposalBox> merged;
    for (int k = 0; k <= max_type; ++k) {
        std::vector<ProposalBox> of_type;
        for (const auto& p : proposals)
            if (p.type == k) of_type.push_back(p);
        for (const auto& p : greedy(of_type)) merged.push_back(p);
    }
    return greedy(merged);
}

bool same_proposal(const ProposalBox& a, const ProposalBox& b) {
    return a.type == b.type && a.score == b.score && a.box.x == b.box.x && a.box.y == b.box.y &&
           a.box.w == b.box.w && a.box.h == b.box.h;
}

}  // namespace

TEST_CASE("proposal side is the window size divided by the level scale") {
    std::vector<LandmarkDetection> dets = {{0, 100.0, 80.0, 0.9f, 0},
                                           {2, 40.0, 40.0, 0.7f, 1}};
    std::vector<double> scales = {0.5, 0.25};
    auto props = landmarks_to_proposals(dets, scales);
    REQUIRE(props.size() == 2);

    REQUIRE(props[0].box.w == 64.0);  // 32 / 0.5
    REQUIRE(props[0].box.h == 64.0);
    REQUIRE(props[0].box.x == 100.0 - 32.0);  // centered on the detection
    REQUIRE(props[0].box.y == 80.0 - 32.0);
    REQUIRE(props[0].score == 0.9f);
    REQUIRE(props[0].type == 0);

    REQUIRE(props[1].box.w == 128.0);  // 32 / 0.25
    REQUIRE(props[1].box.x == 40.0 - 64.0);

    std::vector<LandmarkDetection> bad = {{0, 0.0, 0.0, 0.5f, 7}};
    REQUIRE_THROWS_AS(landmarks_to_proposals(bad, scales), ContractViolation);
}

TEST_CASE("cross-type suppression keeps one box from coincident landmarks") {
    // five landmark types of one face produce overlapping windows; only the
    // best survives the second stage
    std::vector<ProposalBox> props;
    for (int k = 0; k < 5; ++k)
        props.push_back({{10.0 + k, 10.0, 40.0, 40.0}, 0.5f + 0.1f * k, k});
    auto kept = suppress_proposals(props, 0.5);
    REQUIRE(kept.size() == 1);
    REQUIRE(kept[0].type == 4);
}

TEST_CASE("per-type suppression does not merge distant same-type boxes") {
    std::vector<ProposalBox> props = {{{0, 0, 20, 20}, 0.9f, 1},
                                      {{100, 100, 20, 20}, 0.8f, 1},
                                      {{1, 1, 20, 20}, 0.3f, 1}};
    auto kept = suppress_proposals(props, 0.5);
    REQUIRE(kept.size() == 2);
    REQUIRE(kept[0].score == 0.9f);
    REQUIRE(kept[1].score == 0.8f);
}

TEST_CASE("two-stage suppression matches the brute-force oracle") {
    Rng rng(55);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = rng.next_int(0, 15);
        std::vector<ProposalBox> props;
        for (int i = 0; i < n; ++i) {
            props.push_back({{rng.uniform(0, 60), rng.uniform(0, 60), rng.uniform(10, 40),
                              rng.uniform(10, 40)},
                             static_cast<float>(rng.next_double()), rng.next_int(0, 4)});
        }
        auto kept = suppress_proposals(props, 0.5);
        auto want = suppress_oracle(props, 0.5);
        REQUIRE(kept.size() == want.size());
        for (size_t i = 0; i < kept.size(); ++i) REQUIRE(same_proposal(kept[i], want[i]));
    }
}

TEST_CASE("suppression output never grows") {
    Rng rng(56);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = rng.next_int(1, 10);
        std::vector<ProposalBox> props;
        for (int i = 0; i < n; ++i)
            props.push_back({{rng.uniform(0, 30), rng.uniform(0, 30), 20, 20},
                             static_cast<float>(rng.next_double()), rng.next_int(0, 2)});
        auto kept = suppress_proposals(props, 0.5);
        REQUIRE(kept.size() <= props.size());
        REQUIRE_FALSE(kept.empty());
        // pairwise survivors never exceed the IoU threshold
        for (size_t i = 0; i < kept.size(); ++i)
            for (size_t j = i + 1; j < kept.size(); ++j)
                REQUIRE(iou(kept[i].box, kept[j].box) <= 0.5);
    }
}

TEST_CASE("the refiner hook runs between the two stages") {
    std::vector<ProposalBox> props = {{{0, 0, 20, 20}, 0.9f, 0},
                                      {{50, 50, 20, 20}, 0.8f, 1}};
    int refined_count = -1;
    auto refiner = [&](std::vector<ProposalBox> in) {
        refined_count = static_cast<int>(in.size());
        for (auto& p : in) p.box.x += 1.0;  // shift to prove the hook ran
        return in;
    };
    auto kept = suppress_proposals(props, 0.5, refiner);
    REQUIRE(refined_count == 2);
    REQUIRE(kept.size() == 2);
    REQUIRE(kept[0].box.x == 1.0);
}

TEST_CASE("vertical enlargement grows height about the center") {
    ProposalBox p{{10.0, 20.0, 32.0, 32.0}, 0.5f, 0};
    auto out = enlarge_vertical(p, 0.25);
    REQUIRE(out.box.w == 32.0);
    REQUIRE(out.box.h == 40.0);
    REQUIRE(out.box.x == 10.0);
    REQUIRE(out.box.y == 16.0);  // center y stays at 36
    REQUIRE(out.box.y + out.box.h / 2.0 == p.box.y + p.box.h / 2.0);

    auto same = enlarge_vertical(p, 0.0);
    REQUIRE(same.box.y == p.box.y);
    REQUIRE(same.box.h == p.box.h);
    REQUIRE_THROWS_AS(enlarge_vertical(p, -0.1), ContractViolation);
}
