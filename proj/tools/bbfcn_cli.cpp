// Command-line front end: dataset synthesis, training, inference, proposals,
// evaluation, and a gradient self-check. Every run echoes its configuration
// and seed into run.log next to the primary output so results can be replayed.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "bbfcn/eval.hpp"
#include "bbfcn/gradcheck_suite.hpp"
#include "bbfcn/inference.hpp"
#include "bbfcn/proposals.hpp"
#include "bbfcn/serialize.hpp"
#include "bbfcn/synthetic.hpp"
#include "bbfcn/training.hpp"

namespace fs = std::filesystem;
using namespace bbfcn;

namespace {

constexpr const char* kVersion = "bbfcn-1.0.0";

class RunLog {
public:
    explicit RunLog(const std::string& dir) : path_(fs::path(dir) / "run.log") {
        start_ = std::chrono::steady_clock::now();
        lines_ << "version=" << kVersion << "\n";
    }

    template <typename T>
    void config(const std::string& key, const T& value) {
        lines_ << key << "=" << value << "\n";
    }

    void phase(const std::string& name) {
        const auto now = std::chrono::steady_clock::now();
        const double ms =
            std::chrono::duration_cast<std::chrono::microseconds>(now - start_).count() / 1000.0;
        lines_ << "phase " << name << " " << ms << " ms\n";
        start_ = now;
    }

    ~RunLog() {
        std::ofstream out(path_, std::ios::trunc);
        if (out) out << lines_.str();
    }

private:
    fs::path path_;
    std::ostringstream lines_;
    std::chrono::steady_clock::time_point start_;
};

struct DatasetPaths {
    std::string annotations;
    std::string backgrounds;  // text file, one image path per line
};

std::vector<std::string> read_path_list(const std::string& list_path) {
    std::ifstream in(list_path);
    if (!in) throw DataError("cannot open path list: " + list_path);
    std::vector<std::string> paths;
    std::string line;
    const fs::path base = fs::path(list_path).parent_path();
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        fs::path p(line);
        paths.push_back(p.is_absolute() ? p.string() : (base / p).string());
    }
    return paths;
}

TrainDataset load_dataset(const DatasetPaths& paths) {
    TrainDataset ds;
    int k = 0;
    auto faces = parse_annotations_file(paths.annotations, &k);
    ds.k_types = k;
    const fs::path base = fs::path(paths.annotations).parent_path();
    for (auto& face : faces) {
        fs::path p(face.path);
        const std::string full = p.is_absolute() ? p.string() : (base / p).string();
        ds.faces.push_back({decode_image(full), std::move(face)});
    }
    for (const auto& p : read_path_list(paths.backgrounds))
        ds.backgrounds.push_back(decode_image(p));
    return ds;
}

int cmd_synth(const std::string& out_dir, int faces, int backgrounds, uint64_t seed,
              int canvas, double occlusion_prob) {
    fs::create_directories(out_dir);
    RunLog log(out_dir);
    log.config("subcommand", "synth");
    log.config("out", out_dir);
    log.config("faces", faces);
    log.config("backgrounds", backgrounds);
    log.config("seed", seed);
    log.config("canvas", canvas);
    log.config("occlusion_prob", occlusion_prob);

    SyntheticConfig config;
    config.seed = seed;
    config.canvas_w = canvas;
    config.canvas_h = canvas;
    config.occlusion_prob = occlusion_prob;

    std::vector<AnnotatedFace> annotations;
    SyntheticConfig face_cfg = config;
    face_cfg.min_faces = 1;
    face_cfg.max_faces = 1;
    for (int i = 0; i < faces; ++i) {
        auto [img, fs_] = generate_synthetic(face_cfg, static_cast<uint64_t>(i));
        char name[32];
        std::snprintf(name, sizeof(name), "face_%05d.ppm", i);
        write_ppm((fs::path(out_dir) / name).string(), img);
        if (!fs_.empty()) {
            AnnotatedFace a = fs_.front();
            a.path = name;
            annotations.push_back(std::move(a));
        }
    }
    std::ofstream ann((fs::path(out_dir) / "annotations.txt").string(), std::ios::trunc);
    write_annotations(ann, annotations, config.k_types);

    SyntheticConfig bg_cfg = config;
    bg_cfg.min_faces = 0;
    bg_cfg.max_faces = 0;
    std::ofstream list((fs::path(out_dir) / "backgrounds.txt").string(), std::ios::trunc);
    for (int i = 0; i < backgrounds; ++i) {
        auto [img, fs_] = generate_synthetic(bg_cfg, static_cast<uint64_t>(1u << 24) + i);
        char name[32];
        std::snprintf(name, sizeof(name), "bg_%05d.ppm", i);
        write_ppm((fs::path(out_dir) / name).string(), img);
        list << name << "\n";
    }
    log.phase("synth");
    return 0;
}

int cmd_train(bool branch_phase, const DatasetPaths& paths, const std::string& weights_in,
              const std::string& weights_out, int64_t iterations, uint64_t seed,
              const TrainConfig& overrides) {
    const std::string out_dir = fs::path(weights_out).parent_path().string();
    if (!out_dir.empty()) fs::create_directories(out_dir);
    RunLog log(out_dir.empty() ? "." : out_dir);
    log.config("subcommand", branch_phase ? "train-branch" : "train-backbone");
    log.config("annotations", paths.annotations);
    log.config("backgrounds", paths.backgrounds);
    log.config("weights_in", weights_in);
    log.config("weights_out", weights_out);
    log.config("iterations", iterations);
    log.config("seed", seed);
    log.config("batch_size", overrides.batch_size);
    log.config("momentum", overrides.momentum);
    log.config("weight_decay", overrides.weight_decay);
    log.config("mining_patience", overrides.mining_patience);
    log.config("validation_interval", overrides.validation_interval);

    TrainDataset ds = load_dataset(paths);
    log.phase("load-dataset");

    NetworkConfig net_config;
    net_config.landmark_types = ds.k_types;
    TrainConfig config = overrides;
    config.seed = seed;

    BackboneWeights backbone;
    BranchWeights branches;
    TrainState state;
    if (!weights_in.empty()) {
        auto [b, br, cfg] = load_weights_file(weights_in);
        backbone = std::move(b);
        branches = std::move(br);
        net_config = cfg;
        if (fs::exists(weights_in + ".meta") && !branch_phase)
            state = load_checkpoint_state(weights_in);
        else
            state.rng = Rng(seed);
    } else {
        auto [b, br] = init_weights(net_config, seed);
        backbone = std::move(b);
        branches = std::move(br);
        state.rng = Rng(seed);
    }
    log.phase("init");

    TrainHistory history;
    if (branch_phase) {
        require(!weights_in.empty(), "train-branch needs --weights-in with a trained backbone");
        run_branch_training(branches, backbone, ds, config, iterations, state, &history);
    } else {
        run_backbone_training(backbone, ds, config, iterations, state, &history);
    }
    log.phase("train");

    save_checkpoint(weights_out, backbone, branches, net_config, state);
    log.phase("save");
    if (!history.batch_loss.empty())
        std::cout << "final batch loss " << history.batch_loss.back() << "\n";
    for (const auto& [iter, loss] : history.validation_loss)
        std::cout << "validation " << iter << " " << loss << "\n";
    return 0;
}

int cmd_infer(const std::string& weights_path, const std::string& image_path,
              const std::string& heat_dump) {
    RunLog log(".");
    log.config("subcommand", "infer");
    log.config("weights", weights_path);
    log.config("image", image_path);

    auto [backbone, branches, net_config] = load_weights_file(weights_path);
    Image face = decode_image(image_path);
    log.phase("load");

    auto result = detect_constrained(face, backbone, branches);
    log.phase("infer");
    for (size_t k = 0; k < result.size(); ++k)
        std::cout << k << " " << result[k].x << " " << result[k].y << " 1 0\n";

    if (!heat_dump.empty()) {
        Image small = bilinear_resize(face, 32, 32);
        auto heat = backbone_forward(backbone, small);
        for (int k = 0; k < heat.dim(0); ++k)
            write_pgm_channel(heat_dump + ".ch" + std::to_string(k) + ".pgm", heat, k);
        log.phase("dump");
    }
    return 0;
}

int cmd_infer_wild(const std::string& weights_path, const std::string& image_path,
                   float threshold, int levels, bool coarse_only) {
    RunLog log(".");
    log.config("subcommand", "infer-wild");
    log.config("weights", weights_path);
    log.config("image", image_path);
    log.config("threshold", threshold);
    log.config("levels", levels);
    log.config("coarse_only", coarse_only ? 1 : 0);

    auto [backbone, branches, net_config] = load_weights_file(weights_path);
    Image image = decode_image(image_path);
    log.phase("load");

    auto dets = detect_unconstrained(image, backbone, branches, threshold, levels, !coarse_only);
    log.phase("infer");
    for (const auto& d : dets)
        std::cout << d.type << " " << d.x << " " << d.y << " " << d.score << " " << d.level
                  << "\n";
    return 0;
}

int cmd_propose(const std::string& weights_path, const std::string& image_path, float threshold,
                int levels, double enlarge) {
    RunLog log(".");
    log.config("subcommand", "propose");
    log.config("weights", weights_path);
    log.config("image", image_path);
    log.config("threshold", threshold);
    log.config("levels", levels);
    log.config("enlarge", enlarge);

    auto [backbone, branches, net_config] = load_weights_file(weights_path);
    Image image = decode_image(image_path);
    log.phase("load");

    auto dets = detect_unconstrained(image, backbone, branches, threshold, levels);
    auto pyramid = build_pyramid(image, levels);
    std::vector<double> scales;
    for (const auto& level : pyramid) scales.push_back(level.scale);
    auto proposals = suppress_proposals(landmarks_to_proposals(dets, scales));
    log.phase("propose");

    for (const auto& p : proposals) {
        const ProposalBox final = enlarge_vertical(p, enlarge);
        std::cout << final.box.x << " " << final.box.y << " " << final.box.w << " "
                  << final.box.h << " " << final.score << " " << final.type << "\n";
    }
    return 0;
}

std::pair<std::vector<LandmarkSet>, std::vector<LandmarkSet>> detect_annotated(
    const BackboneWeights& backbone, const BranchWeights& branches,
    const std::vector<FaceExample>& faces) {
    std::vector<LandmarkSet> fine, coarse;
    for (const auto& ex : faces) {
        const Box& b = ex.face.box;
        Image crop = crop_rect_zero_pad(ex.image, static_cast<int>(std::lround(b.x)),
                                        static_cast<int>(std::lround(b.y)),
                                        std::max(1, static_cast<int>(std::lround(b.w))),
                                        std::max(1, static_cast<int>(std::lround(b.h))));
        LandmarkSet c;
        LandmarkSet f = detect_constrained(crop, backbone, branches, &c);
        for (auto& lm : f) {
            lm.x += b.x;
            lm.y += b.y;
        }
        for (auto& lm : c) {
            lm.x += b.x;
            lm.y += b.y;
        }
        fine.push_back(std::move(f));
        coarse.push_back(std::move(c));
    }
    return {std::move(fine), std::move(coarse)};
}

std::vector<FaceExample> load_annotated_faces(const std::string& annotations, int* k_out) {
    auto faces = parse_annotations_file(annotations, k_out);
    const fs::path base = fs::path(annotations).parent_path();
    std::vector<FaceExample> out;
    for (auto& face : faces) {
        fs::path p(face.path);
        const std::string full = p.is_absolute() ? p.string() : (base / p).string();
        out.push_back({decode_image(full), std::move(face)});
    }
    return out;
}

int cmd_eval(const std::string& weights_path, const std::string& annotations,
             const std::string& csv_out, bool ablate) {
    RunLog log(".");
    log.config("subcommand", ablate ? "ablate" : "eval");
    log.config("weights", weights_path);
    log.config("annotations", annotations);
    log.config("csv", csv_out);

    auto [backbone, branches, net_config] = load_weights_file(weights_path);
    int k = 0;
    auto faces = load_annotated_faces(annotations, &k);
    log.phase("load");

    auto [fine, coarse] = detect_annotated(backbone, branches, faces);
    log.phase("infer");

    std::vector<AnnotatedFace> gt;
    for (const auto& ex : faces) gt.push_back(ex.face);
    EvalConfig eval_config;

    if (ablate) {
        auto report = ablation_report(coarse, fine, gt, eval_config);
        std::cout << "backbone-only\n"
                  << format_mean_error_table(report.coarse, net_config.landmark_names);
        std::cout << "cascade\n"
                  << format_mean_error_table(report.fine, net_config.landmark_names);
        std::cout << "improvement A "
                  << report.average_difference_pct << "\n";
        if (!csv_out.empty()) {
            std::ofstream out(csv_out, std::ios::trunc);
            if (!out) throw DataError("cannot write: " + csv_out);
            out << "stage,type,mean_error_pct\n";
            for (size_t i = 0; i < report.coarse.per_type_pct.size(); ++i)
                out << "backbone," << net_config.landmark_names[i] << ","
                    << report.coarse.per_type_pct[i] << "\n";
            for (size_t i = 0; i < report.fine.per_type_pct.size(); ++i)
                out << "cascade," << net_config.landmark_names[i] << ","
                    << report.fine.per_type_pct[i] << "\n";
            out << "backbone,A," << report.coarse.average_pct << "\n";
            out << "cascade,A," << report.fine.average_pct << "\n";
        }
    } else {
        auto report = mean_error(fine, gt, eval_config);
        std::cout << format_mean_error_table(report, net_config.landmark_names);
        if (!csv_out.empty()) {
            std::ofstream out(csv_out, std::ios::trunc);
            if (!out) throw DataError("cannot write: " + csv_out);
            out << format_mean_error_csv(report, net_config.landmark_names);
        }
    }
    log.phase("report");
    return 0;
}

int cmd_gradcheck(uint64_t seed, int trials) {
    int status = 0;
    for (const auto& entry : bbfcn::gradcheck::suite()) {
        double worst = 0.0;
        for (int t = 0; t < trials; ++t)
            worst = std::max(worst, entry.check(seed + static_cast<uint64_t>(t)));
        const bool ok = worst <= 1e-4;
        std::cout << entry.name << " max_rel_error " << worst << (ok ? " ok" : " FAIL") << "\n";
        if (!ok) status = 1;
    }
    return status;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cascaded landmark localization pipeline"};
    app.require_subcommand(1);
    app.set_config("--config", "", "flat key=value config file; flags override it");

    uint64_t seed = 0;
    app.add_option("--seed", seed, "master random seed")->capture_default_str();

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    std::string synth_out = "dataset";
    int synth_faces = 100, synth_backgrounds = 50, synth_canvas = 96;
    double synth_occ = 0.0;
    synth->add_option("--out", synth_out, "output directory")->capture_default_str();
    synth->add_option("--faces", synth_faces, "face image count")->capture_default_str();
    synth->add_option("--backgrounds", synth_backgrounds, "background image count")
        ->capture_default_str();
    synth->add_option("--canvas", synth_canvas, "canvas side in pixels")->capture_default_str();
    synth->add_option("--occlusion-prob", synth_occ, "per-face occluder probability")
        ->capture_default_str();

    // shared training options
    TrainConfig train_defaults;
    DatasetPaths paths;
    std::string weights_in, weights_out = "model.weights";
    int64_t iterations = 1000;

    auto add_train_options = [&](CLI::App* cmd, bool needs_input) {
        cmd->add_option("--annotations", paths.annotations, "annotation file")->required();
        cmd->add_option("--backgrounds", paths.backgrounds, "background list file")->required();
        cmd->add_option("--iterations", iterations, "training iterations")
            ->capture_default_str();
        auto* win = cmd->add_option("--weights-in", weights_in,
                                    "initial weights (resumes if a sidecar exists)");
        if (needs_input) win->required();
        cmd->add_option("--weights-out", weights_out, "output weight file")
            ->capture_default_str();
        cmd->add_option("--batch-size", train_defaults.batch_size, "minibatch size")
            ->capture_default_str();
        cmd->add_option("--momentum", train_defaults.momentum, "SGD momentum")
            ->capture_default_str();
        cmd->add_option("--weight-decay", train_defaults.weight_decay, "L2 weight decay")
            ->capture_default_str();
        cmd->add_option("--mining-patience", train_defaults.mining_patience,
                        "stagnant validation checks before hard negatives")
            ->capture_default_str();
        cmd->add_option("--validation-interval", train_defaults.validation_interval,
                        "iterations between validation passes")
            ->capture_default_str();
        cmd->add_option("--lr", train_defaults.backbone_schedule.front().lr,
                        "override the first learning-rate stage");
    };
    auto* train_backbone =
        app.add_subcommand("train-backbone", "train the coarse heat-map network");
    add_train_options(train_backbone, false);
    auto* train_branch = app.add_subcommand("train-branch", "train the refiner networks");
    add_train_options(train_branch, true);
    float branch_lr = 0.0f;
    train_branch->add_option("--branch-lr", branch_lr, "override the first branch lr stage");

    // infer (constrained)
    auto* infer = app.add_subcommand("infer", "constrained landmarking of one face crop");
    std::string weights_path, image_path, heat_dump;
    infer->add_option("--weights", weights_path, "weight file")->required();
    infer->add_option("--image", image_path, "pre-cropped face image")->required();
    infer->add_option("--dump-heat", heat_dump, "grayscale heat-map dump prefix");

    // infer-wild (unconstrained)
    auto* wild = app.add_subcommand("infer-wild", "pyramid detection over a full image");
    float threshold = 0.5f;
    int levels = 7;
    bool coarse_only = false;
    wild->add_option("--weights", weights_path, "weight file")->required();
    wild->add_option("--image", image_path, "input image")->required();
    wild->add_option("--threshold", threshold, "candidate response threshold")
        ->capture_default_str();
    wild->add_option("--levels", levels, "pyramid levels")->capture_default_str();
    wild->add_flag("--coarse-only", coarse_only, "skip branch refinement");

    // propose
    auto* propose = app.add_subcommand("propose", "landmark-derived face proposals");
    double enlarge = 0.25;
    propose->add_option("--weights", weights_path, "weight file")->required();
    propose->add_option("--image", image_path, "input image")->required();
    propose->add_option("--threshold", threshold, "candidate response threshold")
        ->capture_default_str();
    propose->add_option("--levels", levels, "pyramid levels")->capture_default_str();
    propose->add_option("--enlarge", enlarge, "vertical enlargement fraction")
        ->capture_default_str();

    // eval / ablate
    std::string csv_out;
    auto* eval_cmd = app.add_subcommand("eval", "mean-error report over annotated faces");
    eval_cmd->add_option("--weights", weights_path, "weight file")->required();
    eval_cmd->add_option("--annotations", paths.annotations, "annotation file")->required();
    eval_cmd->add_option("--csv", csv_out, "machine-readable report path");
    auto* ablate_cmd =
        app.add_subcommand("ablate", "backbone-only vs full-cascade comparison");
    ablate_cmd->add_option("--weights", weights_path, "weight file")->required();
    ablate_cmd->add_option("--annotations", paths.annotations, "annotation file")->required();
    ablate_cmd->add_option("--csv", csv_out, "machine-readable report path");

    // gradcheck
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient self-check");
    int gradcheck_trials = 5;
    gradcheck->add_option("--trials", gradcheck_trials, "seeds per op")->capture_default_str();

    // allow global options (--seed) after the subcommand name
    for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; }))
        sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // help exits clean, every parse problem is usage error
    }

    try {
        if (synth->parsed())
            return cmd_synth(synth_out, synth_faces, synth_backgrounds, seed, synth_canvas,
                             synth_occ);
        if (train_backbone->parsed() || train_branch->parsed()) {
            TrainConfig config = train_defaults;
            if (train_backbone->parsed() && train_backbone->count("--lr"))
                config.backbone_schedule = {{25000, train_defaults.backbone_schedule.front().lr}};
            if (train_branch->parsed() && train_branch->count("--branch-lr"))
                config.branch_schedule = {{30000, branch_lr}, {50000, branch_lr * 0.1f}};
            return cmd_train(train_branch->parsed(), paths, weights_in, weights_out, iterations,
                             seed, config);
        }
        if (infer->parsed()) return cmd_infer(weights_path, image_path, heat_dump);
        if (wild->parsed())
            return cmd_infer_wild(weights_path, image_path, threshold, levels, coarse_only);
        if (propose->parsed())
            return cmd_propose(weights_path, image_path, threshold, levels, enlarge);
        if (eval_cmd->parsed())
            return cmd_eval(weights_path, paths.annotations, csv_out, false);
        if (ablate_cmd->parsed())
            return cmd_eval(weights_path, paths.annotations, csv_out, true);
        if (gradcheck->parsed()) return cmd_gradcheck(seed, gradcheck_trials);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
