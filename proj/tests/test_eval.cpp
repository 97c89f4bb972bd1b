#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>

#include "bbfcn/eval.hpp"
#include "bbfcn/rng.hpp"

using namespace bbfcn;

namespace {

AnnotatedFace make_face(double bx, double by, double bw, double bh,
                        std::vector<Landmark> lms) {
    AnnotatedFace f;
    f.box = {bx, by, bw, bh};
    f.landmarks = std::move(lms);
    return f;
}

// exhaustive maximum bipartite matching over subsets of predictions; feasible
// for fixtures with at most ~6 predictions
int max_matching_oracle(const std::vector<LandmarkDetection>& preds,
                        const std::vector<std::array<double, 3>>& gts, double pe) {
    const size_t n = preds.size();
    int best = 0;
    std::vector<int> assign(n, -1);
    // depth-first over (pred -> gt | unmatched) assignments
    std::function<void(size_t, uint32_t, int)> dfs = [&](size_t i, uint32_t used, int hit) {
        if (i == n) {
            best = std::max(best, hit);
            return;
        }
        dfs(i + 1, used, hit);
        for (size_t g = 0; g < gts.size(); ++g) {
            if (used & (1u << g)) continue;
            const double dist = std::hypot(preds[i].x - gts[g][0], preds[i].y - gts[g][1]);
            if (dist <= pe * gts[g][2]) dfs(i + 1, used | (1u << g), hit + 1);
        }
    };
    dfs(0, 0, 0);
    return best;
}

}  // namespace

TEST_CASE("interocular distance from eye centers") {
    auto face = make_face(0, 0, 60, 60,
                          {{10, 10, true}, {40, 10, true}, {25, 30, true}});
    EvalConfig config;
    REQUIRE(interocular_distance(face, config) == 30.0);
}

TEST_CASE("invisible eye falls back to the box-length ratio") {
    auto face = make_face(0, 0, 100, 80,
                          {{10, 10, false}, {40, 10, true}, {25, 30, true}});
    EvalConfig config;
    REQUIRE_THAT(interocular_distance(face, config),
                 Catch::Matchers::WithinAbs(41.9, 1e-9));  // 0.419 * max(100, 80)

    config.mode = InterocularMode::BboxFallback;
    auto visible = make_face(0, 0, 100, 80, {{10, 10, true}, {40, 10, true}});
    REQUIRE_THAT(interocular_distance(visible, config),
                 Catch::Matchers::WithinAbs(41.9, 1e-9));

    auto no_box = make_face(0, 0, 0, 0, {{10, 10, false}, {40, 10, false}});
    REQUIRE_THROWS_AS(interocular_distance(no_box, config), EvalError);
}

TEST_CASE("outer-corner mode reads the configured corner indices") {
    auto face = make_face(0, 0, 60, 60,
                          {{10, 10, true}, {40, 10, true}, {5, 12, true}, {45, 12, true}});
    EvalConfig config;
    config.mode = InterocularMode::OuterCorners;
    config.left_corner_type = 2;
    config.right_corner_type = 3;
    REQUIRE(interocular_distance(face, config) == 40.0);
}

TEST_CASE("mean error of a known offset") {
    // one face, interocular 30; every detection off by 3 pixels -> 10% each
    auto face = make_face(0, 0, 60, 60,
                          {{10, 10, true}, {40, 10, true}, {25, 30, true}});
    LandmarkSet det = {{13, 10, true}, {40, 13, true}, {25, 27, true}};
    EvalConfig config;
    auto report = mean_error({det}, {face}, config);
    REQUIRE(report.per_type_pct.size() == 3);
    for (double e : report.per_type_pct)
        REQUIRE_THAT(e, Catch::Matchers::WithinAbs(10.0, 1e-9));
    REQUIRE_THAT(report.average_pct, Catch::Matchers::WithinAbs(10.0, 1e-9));
}

TEST_CASE("perfect detections give zero error and invisible GT is excluded") {
    auto face = make_face(0, 0, 60, 60,
                          {{10, 10, true}, {40, 10, true}, {99, 99, false}});
    LandmarkSet det = {{10, 10, true}, {40, 10, true}, {0, 0, true}};  // type 2 ignored
    EvalConfig config;
    auto report = mean_error({det}, {face}, config);
    REQUIRE(report.average_pct == 0.0);
    REQUIRE(report.per_type_pct[2] == 0.0);
}

TEST_CASE("per-face errors average per type, then across types") {
    auto f1 = make_face(0, 0, 60, 60, {{10, 10, true}, {40, 10, true}});
    auto f2 = make_face(0, 0, 60, 60, {{10, 10, true}, {40, 10, true}});
    // face 1: both types off by 1.2 px (4%); face 2: both off by 1.8 px (6%)
    LandmarkSet d1 = {{11.2, 10, true}, {40, 11.2, true}};
    LandmarkSet d2 = {{11.8, 10, true}, {40, 11.8, true}};
    EvalConfig config;
    auto report = mean_error({d1, d2}, {f1, f2}, config);
    REQUIRE_THAT(report.average_pct, Catch::Matchers::WithinAbs(5.0, 1e-9));

    REQUIRE_THROWS_AS(mean_error({d1}, {f1, f2}, config), EvalError);
    REQUIRE_THROWS_AS(mean_error({}, {}, config), EvalError);
}

TEST_CASE("mean error is translation invariant") {
    Rng rng(70);
    EvalConfig config;
    for (int trial = 0; trial < 50; ++trial) {
        auto face = make_face(0, 0, 60, 60,
                              {{10, 10, true}, {40, 10, true}, {25, 30, true}});
        LandmarkSet det;
        for (const auto& lm : face.landmarks)
            det.push_back({lm.x + rng.uniform(-4, 4), lm.y + rng.uniform(-4, 4), true});
        auto base = mean_error({det}, {face}, config);

        const double tx = rng.uniform(-50, 50), ty = rng.uniform(-50, 50);
        auto moved_face = face;
        moved_face.box.x += tx;
        moved_face.box.y += ty;
        LandmarkSet moved_det;
        for (size_t k = 0; k < det.size(); ++k) {
            moved_face.landmarks[k].x += tx;
            moved_face.landmarks[k].y += ty;
            moved_det.push_back({det[k].x + tx, det[k].y + ty, true});
        }
        auto moved = mean_error({moved_det}, {moved_face}, config);
        REQUIRE_THAT(moved.average_pct,
                     Catch::Matchers::WithinAbs(base.average_pct, 1e-9));
    }
}

TEST_CASE("recall is one when every landmark is hit and zero with no predictions") {
    auto face = make_face(0, 0, 60, 60, {{10, 10, true}, {40, 10, true}});
    std::vector<std::vector<AnnotatedFace>> gt = {{face}};
    EvalConfig config;

    std::vector<std::vector<LandmarkDetection>> exact = {
        {{0, 10, 10, 0.9f, 0}, {1, 40, 10, 0.8f, 0}}};
    auto hit = recall_error_curve(exact, gt, config, 2);
    for (double r : hit.average_recall) REQUIRE(r == 1.0);
    REQUIRE(hit.average_at(0.10) == 1.0);

    std::vector<std::vector<LandmarkDetection>> none = {{}};
    auto miss = recall_error_curve(none, gt, config, 2);
    for (double r : miss.average_recall) REQUIRE(r == 0.0);

    REQUIRE_THROWS_AS(hit.average_at(0.07), EvalError);
}

TEST_CASE("a far-off prediction recalls nothing at tight thresholds") {
    // interocular 30; detections 1.2 px off recall at PE >= 4% only
    auto face = make_face(0, 0, 60, 60, {{10, 10, true}, {40, 10, true}});
    std::vector<std::vector<AnnotatedFace>> gt = {{face}};
    std::vector<std::vector<LandmarkDetection>> preds = {
        {{0, 11.2, 10, 0.9f, 0}, {1, 40, 11.2, 0.8f, 0}}};
    EvalConfig config;
    auto report = recall_error_curve(preds, gt, config, 2);
    REQUIRE(report.average_at(0.02) == 0.0);
    REQUIRE(report.average_at(0.04) == 1.0);
    REQUIRE(report.average_at(0.10) == 1.0);
}

TEST_CASE("recall matching is one-to-one") {
    // two predictions near one GT point: only one can match
    auto face = make_face(0, 0, 60, 60, {{10, 10, true}, {40, 10, true}});
    std::vector<std::vector<AnnotatedFace>> gt = {{face}};
    std::vector<std::vector<LandmarkDetection>> preds = {
        {{0, 10, 10, 0.9f, 0}, {0, 10.5, 10, 0.8f, 0}}};
    EvalConfig config;
    auto report = recall_error_curve(preds, gt, config, 2);
    // type 0 fully recalled, type 1 missed -> average 0.5
    REQUIRE(report.average_at(0.10) == 0.5);
    REQUIRE(report.per_type[0].recall.back() == 1.0);
    REQUIRE(report.per_type[1].recall.back() == 0.0);
}

TEST_CASE("only the top-m predictions per type count") {
    auto face = make_face(0, 0, 60, 60, {{10, 10, true}, {40, 10, true}});
    std::vector<std::vector<AnnotatedFace>> gt = {{face}};
    EvalConfig config;
    config.budget_m = 2;
    // the correct prediction is ranked third by score and gets dropped
    std::vector<std::vector<LandmarkDetection>> preds = {{{0, 50, 50, 0.9f, 0},
                                                          {0, 55, 50, 0.8f, 0},
                                                          {0, 10, 10, 0.7f, 0}}};
    auto capped = recall_error_curve(preds, gt, config, 2);
    REQUIRE(capped.per_type[0].recall.back() == 0.0);

    config.budget_m = 3;
    auto full = recall_error_curve(preds, gt, config, 2);
    REQUIRE(full.per_type[0].recall.back() == 1.0);
}

TEST_CASE("recall is monotone in the PE threshold") {
    Rng rng(71);
    EvalConfig config;
    for (int trial = 0; trial < 30; ++trial) {
        auto face = make_face(0, 0, 60, 60,
                              {{rng.uniform(5, 55), rng.uniform(5, 55), true},
                               {rng.uniform(5, 55), rng.uniform(5, 55), true}});
        std::vector<std::vector<LandmarkDetection>> preds(1);
        const int n = rng.next_int(0, 6);
        for (int i = 0; i < n; ++i)
            preds[0].push_back({rng.next_int(0, 1), rng.uniform(0, 60), rng.uniform(0, 60),
                                static_cast<float>(rng.next_double()), 0});
        auto report = recall_error_curve(preds, {{face}}, config, 2);
        for (size_t i = 1; i < report.average_recall.size(); ++i)
            REQUIRE(report.average_recall[i] >= report.average_recall[i - 1]);
    }
}

TEST_CASE("greedy matching attains the optimum on well-separated fixtures") {
    // GT points at least two radii apart: each prediction lies within PE of at
    // most one of them, so greedy matching equals maximum bipartite matching
    Rng rng(72);
    const double pe = 0.10;
    const double box_io = 0.419 * 200.0;  // one-landmark faces use bbox mode
    EvalConfig box_cfg;
    box_cfg.mode = InterocularMode::BboxFallback;
    box_cfg.pe_grid = {pe};
    const double min_sep = 2.5 * pe * box_io;

    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::array<double, 3>> gts;
        for (int g = 0; g < 4; ++g) {
            for (int attempt = 0; attempt < 50; ++attempt) {
                const double x = rng.uniform(20, 180), y = rng.uniform(20, 180);
                bool ok = true;
                for (const auto& other : gts)
                    if (std::hypot(x - other[0], y - other[1]) < min_sep) ok = false;
                if (!ok) continue;
                gts.push_back({x, y, box_io});
                break;
            }
        }
        if (gts.empty()) continue;

        std::vector<LandmarkDetection> preds;
        const int n = rng.next_int(0, 6);
        for (int i = 0; i < n; ++i) {
            const auto& target = gts[static_cast<size_t>(rng.next_below(gts.size()))];
            preds.push_back({0, target[0] + rng.uniform(-pe * box_io, pe * box_io),
                             target[1] + rng.uniform(-pe * box_io, pe * box_io),
                             static_cast<float>(rng.next_double()), 0});
        }

        std::vector<AnnotatedFace> faces;
        for (const auto& g : gts)
            faces.push_back(make_face(0, 0, 200, 200, {{g[0], g[1], true}}));

        auto report = recall_error_curve({preds}, {faces}, box_cfg, 1);
        const int want = max_matching_oracle(preds, gts, pe);
        REQUIRE_THAT(report.per_type[0].recall[0] * static_cast<double>(gts.size()),
                     Catch::Matchers::WithinAbs(static_cast<double>(want), 1e-9));
    }
}

TEST_CASE("ablation of identical detections reports zero difference") {
    auto face = make_face(0, 0, 60, 60,
                          {{10, 10, true}, {40, 10, true}, {25, 30, true}});
    LandmarkSet det = {{12, 10, true}, {40, 12, true}, {25, 28, true}};
    EvalConfig config;
    auto report = ablation_report({det}, {det}, {face}, config);
    REQUIRE(report.average_difference_pct == 0.0);
    for (double d : report.difference_pct) REQUIRE(d == 0.0);

    // a strictly better fine stage yields a positive difference
    LandmarkSet better = {{11, 10, true}, {40, 11, true}, {25, 29, true}};
    auto improved = ablation_report({det}, {better}, {face}, config);
    REQUIRE(improved.average_difference_pct > 0.0);
    REQUIRE(improved.fine.average_pct < improved.coarse.average_pct);
}

TEST_CASE("report formatting carries every type plus the average row") {
    MeanErrorReport report;
    report.per_type_pct = {1.25, 2.5};
    report.average_pct = 1.875;
    auto table = format_mean_error_table(report, {"LE", "RE"});
    REQUIRE(table.find("LE 1.25") != std::string::npos);
    REQUIRE(table.find("RE 2.50") != std::string::npos);
    REQUIRE(table.find("A 1.88") != std::string::npos);

    auto csv = format_mean_error_csv(report, {"LE", "RE"});
    REQUIRE(csv.find("type,mean_error_pct") != std::string::npos);
    REQUIRE(csv.find("A,1.8750") != std::string::npos);

    RecallReport recall;
    recall.per_type.resize(1);
    recall.per_type[0].pe = {0.05, 0.10};
    recall.per_type[0].recall = {0.5, 0.75};
    recall.average_recall = {0.5, 0.75};
    auto rcsv = format_recall_csv(recall, {"LE"});
    REQUIRE(rcsv.find("# LE") != std::string::npos);
    REQUIRE(rcsv.find("0.1000,0.7500") != std::string::npos);
    REQUIRE(rcsv.find("# average") != std::string::npos);
}
