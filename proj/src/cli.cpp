#include "toadhm/cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "toadhm/checkpoint.hpp"
#include "toadhm/eval.hpp"
#include "toadhm/parallel.hpp"
#include "toadhm/rng.hpp"

namespace fs = std::filesystem;

namespace toadhm {

namespace {

void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument(where + " must be an object");
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw std::invalid_argument("unknown " + where + " key: " + key);
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void SynthConfig::validate() const {
    if (train_toad < 0 || train_not_toad < 0 || test_toad < 0 || test_not_toad < 0)
        throw std::invalid_argument("synth counts must be >= 0");
    if (train_toad == 0 || train_not_toad == 0) throw std::invalid_argument("both classes required in the training pool");
    if (test_toad + test_not_toad > 0 && (test_toad == 0 || test_not_toad == 0))
        throw std::invalid_argument("both classes required in the test split");
    if (height < 64 || width < 64) throw std::invalid_argument("synth shape must be at least 64x64");
    if (frames_per_clip < 1) throw std::invalid_argument("synth frames_per_clip must be >= 1");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = nlohmann::json{{"train_counts", {{"toad", c.train_toad}, {"not_toad", c.train_not_toad}}},
                       {"test_counts", {{"toad", c.test_toad}, {"not_toad", c.test_not_toad}}},
                       {"seed", c.seed},
                       {"shape", {c.height, c.width}},
                       {"frames_per_clip", c.frames_per_clip}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
    reject_unknown(j, {"train_counts", "test_counts", "seed", "shape", "frames_per_clip"}, "synth");
    auto counts = [](const nlohmann::json& block, const std::string& where, int& toad, int& not_toad) {
        reject_unknown(block, {"toad", "not_toad"}, where);
        read_if(block, "toad", toad);
        read_if(block, "not_toad", not_toad);
    };
    if (j.contains("train_counts")) counts(j.at("train_counts"), "synth.train_counts", c.train_toad, c.train_not_toad);
    if (j.contains("test_counts")) counts(j.at("test_counts"), "synth.test_counts", c.test_toad, c.test_not_toad);
    read_if(j, "seed", c.seed);
    if (j.contains("shape")) {
        const auto shape = j.at("shape").get<std::array<int, 2>>();
        c.height = shape[0];
        c.width = shape[1];
    }
    read_if(j, "frames_per_clip", c.frames_per_clip);
}

void RunConfig::validate() const {
    if (name.empty() || name.find('/') != std::string::npos) throw std::invalid_argument("run name must be a plain file name");
    synth.validate();
    augment.validate();
    backbone.validate();
    train.validate();
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("eval threshold must lie in [0, 1]");
    check_stride_divisible(test_input.height, test_input.width);
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    nlohmann::json train = c.train;
    const nlohmann::json loss = train.at("loss");
    train.erase("loss");
    j = nlohmann::json{{"name", c.name},
                       {"dataset_root", c.dataset_root.string()},
                       {"test_root", c.test_root.string()},
                       {"output_dir", c.output_dir.string()},
                       {"synth", c.synth},
                       {"augment", c.augment},
                       {"backbone", c.backbone},
                       {"loss", loss},
                       {"train", train},
                       {"eval", {{"threshold", c.threshold}, {"input", {c.test_input.height, c.test_input.width}}}}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    reject_unknown(j,
                   {"name", "dataset_root", "test_root", "output_dir", "synth", "augment", "backbone", "loss", "train",
                    "eval"},
                   "config");
    read_if(j, "name", c.name);
    if (j.contains("dataset_root")) c.dataset_root = j.at("dataset_root").get<std::string>();
    if (j.contains("test_root")) c.test_root = j.at("test_root").get<std::string>();
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("synth")) c.synth = j.at("synth").get<SynthConfig>();
    if (j.contains("augment")) c.augment = j.at("augment").get<AugmentConfig>();
    if (j.contains("backbone")) c.backbone = j.at("backbone").get<BackboneConfig>();
    if (j.contains("train")) {
        if (j.at("train").contains("loss")) throw std::invalid_argument("loss belongs at the top level of the config");
        c.train = j.at("train").get<TrainConfig>();
    }
    if (j.contains("loss")) c.train.loss = j.at("loss").get<LossConfig>();
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        reject_unknown(e, {"threshold", "input"}, "eval");
        read_if(e, "threshold", c.threshold);
        if (e.contains("input")) {
            const auto shape = e.at("input").get<std::array<int, 2>>();
            c.test_input = cv::Size(shape[1], shape[0]);
        }
    }
    c.validate();
}

RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw CliError(kExitInput, "cannot read config " + path.string());
    RunConfig config;
    try {
        config = nlohmann::json::parse(in).get<RunConfig>();
    } catch (const std::exception& e) {
        throw CliError(kExitInput, "invalid config " + path.string() + ": " + e.what());
    }
    const fs::path base = path.parent_path();
    for (fs::path* p : {&config.dataset_root, &config.test_root, &config.output_dir})
        if (p->is_relative()) *p = (base / *p).lexically_normal();
    return config;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

std::string clip_name(const std::string& pool, Label label, int clip) {
    std::ostringstream s;
    s << pool << '-' << (label == Label::toad ? "toad" : "other") << '-' << std::setw(3) << std::setfill('0') << clip;
    return s.str();
}

DatasetManifest write_split(const fs::path& root, const SynthConfig& synth, std::uint64_t split_seed, bool test,
                            int n_toad, int n_not_toad, int threads) {
    if (fs::exists(root) && !fs::is_directory(root)) throw CliError(kExitInput, root.string() + " is not a directory");
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw CliError(kExitArtifact, "cannot create " + root.string() + ": " + ec.message());

    const int deep = synth.frames_per_clip * 41 + 10;
    const std::vector<int> frames =
        test ? extract_test_indices(deep * 9) : extract_training_indices(deep * 41);
    const std::string pool = test ? "test" : "train";

    for (const char* sub : {"toad", "not_toad", "masks"}) fs::create_directories(root / sub);
    DatasetManifest manifest;
    manifest.root = root;
    manifest.split_seed = split_seed;
    manifest.records.resize(static_cast<std::size_t>(n_toad + n_not_toad));
    parallel_for(manifest.records.size(), resolve_threads(threads), [&](std::size_t i) {
        const int j = static_cast<int>(i);
        const Label label = j < n_toad ? Label::toad : Label::not_toad;
        const int k = j < n_toad ? j : j - n_toad;
        FrameRecord record = synth_scene(hash_values(synth.seed, test ? 1u : 0u, static_cast<std::uint64_t>(label),
                                                     static_cast<std::uint64_t>(k)),
                                         label, synth.height, synth.width);
        record.clip_id = clip_name(pool, label, k / synth.frames_per_clip);
        record.frame_index = frames.at(static_cast<std::size_t>(k % synth.frames_per_clip));
        manifest.records[i] = write_record(root, record);
    });
    save_manifest_json(manifest, root / "manifest.json");
    return manifest;
}

DatasetManifest open_dataset(const fs::path& root) {
    if (!fs::is_directory(root)) throw CliError(kExitInput, "dataset not found: " + root.string());
    try {
        return load_manifest(root);
    } catch (const std::exception& e) {
        throw CliError(kExitInput, "invalid dataset " + root.string() + ": " + e.what());
    }
}

HeatmapModel open_checkpoint(const fs::path& path) {
    if (!fs::exists(path)) throw CliError(kExitInput, "checkpoint not found: " + path.string());
    try {
        return load_checkpoint(path);
    } catch (const std::exception& e) {
        throw CliError(kExitArtifact, e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
    if (!out) throw CliError(kExitArtifact, "cannot write " + path.string());
}

}  // namespace

std::pair<DatasetManifest, DatasetManifest> cmd_synth(const RunConfig& config, int threads) {
    config.synth.validate();
    const auto& s = config.synth;
    DatasetManifest train = write_split(config.dataset_root, s, config.train.split_seed, false, s.train_toad,
                                        s.train_not_toad, threads);
    DatasetManifest test;
    if (s.test_toad + s.test_not_toad > 0)
        test = write_split(config.test_root, s, config.train.split_seed, true, s.test_toad, s.test_not_toad, threads);
    return {std::move(train), std::move(test)};
}

TrainResult cmd_train(const RunConfig& config, bool trace, std::ostream& log, int threads) {
    DatasetManifest manifest = open_dataset(config.dataset_root);
    const auto counts = manifest.counts();
    if (counts.at(Label::toad) == 0 || counts.at(Label::not_toad) == 0)
        throw CliError(kExitInput, "both classes required in " + config.dataset_root.string());

    const fs::path run_dir = config.run_dir();
    std::error_code ec;
    fs::create_directories(run_dir, ec);
    if (ec) throw CliError(kExitArtifact, "cannot create " + run_dir.string() + ": " + ec.message());
    write_text(run_dir / "config.json", nlohmann::json(config).dump(2) + "\n");

    TrainOptions options;
    options.run_dir = run_dir;
    options.trace = trace;
    options.threads = threads;
    options.log = [&log](const std::string& line) { log << line << std::endl; };
    return run_training(manifest, config.train, config.augment, config.backbone, options);
}

nlohmann::json cmd_eval(const fs::path& checkpoint, const fs::path& dataset, const fs::path& out_dir, double threshold,
                        cv::Size input, const fs::path& overlay_dir, int threads) {
    const HeatmapModel model = open_checkpoint(checkpoint);
    const DatasetManifest manifest = open_dataset(dataset);
    if (manifest.empty()) throw CliError(kExitInput, "dataset is empty: " + dataset.string());

    EvalOptions options;
    options.threshold = threshold;
    options.input = input;
    options.overlay_dir = overlay_dir;
    options.threads = threads;
    const EvalReport report = evaluate_dataset(model, manifest, options);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw CliError(kExitArtifact, "cannot create " + out_dir.string() + ": " + ec.message());
    const nlohmann::json provenance{{"checkpoint", fs::absolute(checkpoint).string()},
                                    {"dataset", fs::absolute(dataset).string()},
                                    {"input", {input.height, input.width}}};
    nlohmann::json j = report.to_json(provenance);
    write_text(out_dir / "report.json", j.dump(2) + "\n");
    report.write_histogram_csv(out_dir / "histogram.csv");
    report.write_id_list(out_dir / "false_negatives.txt", Label::toad, Label::not_toad);
    report.write_id_list(out_dir / "false_positives.txt", Label::not_toad, Label::toad);
    return j;
}

cv::Mat read_input_image(const fs::path& path, cv::Size input, bool pad) {
    if (!fs::is_regular_file(path)) throw CliError(kExitInput, "image not found: " + path.string());
    cv::Mat image = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (image.empty()) throw CliError(kExitInput, "unreadable image: " + path.string());
    if (image.rows >= input.height && image.cols >= input.width) return image;
    if (!pad)
        throw CliError(kExitInput, "image " + path.string() + " is " + shape_string(image.rows, image.cols) +
                                       ", smaller than " + shape_string(input.height, input.width) +
                                       " (use --pad)");
    const int dr = std::max(0, input.height - image.rows);
    const int dc = std::max(0, input.width - image.cols);
    cv::Mat padded;
    cv::copyMakeBorder(image, padded, dr / 2, dr - dr / 2, dc / 2, dc - dc / 2, cv::BORDER_CONSTANT, cv::Scalar::all(0));
    return padded;
}

// ---------------------------------------------------------------------------
// Entry point

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Heat-map toad detector: synthetic data, training, evaluation and prediction", "toadhm"};
    app.require_subcommand(1);

    fs::path config_path;
    std::uint64_t seed = 0;
    fs::path out_path;
    double threshold = -1.0;
    bool trace = false;
    std::string loss;
    double wt = 0.0;
    int threads = 0;
    fs::path overlay_dir, checkpoint, dataset, image, overlay_file;
    bool pad = false;

    auto* synth = app.add_subcommand("synth", "write the synthetic training pool and test split");
    auto* train = app.add_subcommand("train", "train a model with the plateau/restart protocol");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a labelled dataset");
    auto* predict = app.add_subcommand("predict", "score a single image");
    auto* over = app.add_subcommand("overlay", "write the heat-map overlay of a single image");

    for (auto* cmd : {synth, train, eval, predict, over})
        cmd->add_option("--config", config_path, "run config file (JSON)")->check(CLI::ExistingFile);
    synth->get_option("--config")->required();
    train->get_option("--config")->required();

    for (auto* cmd : {synth, train}) cmd->add_option("--seed", seed, "override every seed of the run");
    synth->add_option("--out", out_path, "parent directory for train/ and test/");
    train->add_option("--out", out_path, "output directory for runs");
    train->add_flag("--trace", trace, "write the per-sample augmentation log");
    train->add_option("--loss", loss, "loss kind")->check(CLI::IsMember({"mse", "weighted_bce"}));
    train->add_option("--wt", wt, "toad weight of the weighted BCE loss");

    eval->add_option("--checkpoint", checkpoint, "checkpoint manifest or run directory");
    eval->add_option("--dataset", dataset, "labelled dataset root");
    eval->add_option("--out", out_path, "report directory");
    eval->add_option("--overlay-dir", overlay_dir, "write one overlay PNG per true positive");
    for (auto* cmd : {synth, train, eval})
        cmd->add_option("--threads", threads, "image-level workers (0: all hardware threads)")->check(CLI::NonNegativeNumber);
    for (auto* cmd : {eval, predict, over}) cmd->add_option("--threshold", threshold, "decision threshold")->check(CLI::Range(0.0, 1.0));

    for (auto* cmd : {predict, over}) {
        cmd->add_option("--checkpoint", checkpoint, "checkpoint manifest or run directory")->required();
        cmd->add_option("image", image, "input image")->required();
        cmd->add_flag("--pad", pad, "zero-pad images smaller than the test input");
    }
    predict->add_option("--overlay", overlay_file, "also write the overlay PNG here");
    over->add_option("--out", overlay_file, "overlay PNG path")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitInput;
    }

    try {
        RunConfig config;
        if (!config_path.empty()) config = load_run_config(config_path);
        if (threshold >= 0.0) config.threshold = threshold;

        if (synth->parsed()) {
            if (synth->count("--seed")) config.synth.seed = seed;
            if (!out_path.empty()) {
                config.dataset_root = out_path / "train";
                config.test_root = out_path / "test";
            }
            try {
                config.synth.validate();
            } catch (const std::invalid_argument& e) {
                throw CliError(kExitInput, e.what());
            }
            const auto [tr, te] = cmd_synth(config, threads);
            out << "wrote " << tr.size() << " training-pool records to " << config.dataset_root.string() << '\n';
            if (!te.empty()) out << "wrote " << te.size() << " test records to " << config.test_root.string() << '\n';
        } else if (train->parsed()) {
            if (train->count("--seed")) {
                config.train.split_seed = seed;
                config.train.head_seed = seed;
                config.backbone.seed = seed;
            }
            if (!out_path.empty()) config.output_dir = out_path;
            if (!loss.empty()) {
                config.train.loss.kind = loss_kind_from_string(loss);
                if (config.train.loss.kind == LossKind::mse && !train->count("--wt")) config.train.loss.toad_weight = 100.0;
            }
            if (train->count("--wt")) config.train.loss.toad_weight = wt;
            try {
                config.train.validate();
            } catch (const std::invalid_argument& e) {
                throw CliError(kExitInput, e.what());
            }
            const TrainResult result = cmd_train(config, trace, err, threads);
            out << result.history.summary().dump(2) << '\n';
        } else if (eval->parsed()) {
            const fs::path ckpt = checkpoint.empty() ? config.run_dir() : checkpoint;
            const fs::path data = dataset.empty() ? config.test_root : dataset;
            const fs::path dir = out_path.empty() ? config.run_dir() / "eval" : out_path;
            const nlohmann::json report = cmd_eval(ckpt, data, dir, config.threshold, config.test_input, overlay_dir, threads);
            out << report.dump(2) << '\n';
        } else {
            const HeatmapModel model = open_checkpoint(checkpoint);
            const cv::Mat bgr = read_input_image(image, config.test_input, pad);
            const Prediction p = predict_image(model, bgr, config.test_input);
            if (!overlay_file.empty()) {
                const cv::Mat img = overlay(p.heatmap, center_crop(bgr, config.test_input));
                if (!cv::imwrite(overlay_file.string(), img))
                    throw CliError(kExitArtifact, "cannot write " + overlay_file.string());
            }
            if (predict->parsed())
                out << to_string(classify(p.score, config.threshold)) << "  score=" << std::fixed << std::setprecision(4)
                    << p.score << '\n';
            else
                out << "wrote " << overlay_file.string() << '\n';
        }
        return kExitOk;
    } catch (const CliError& e) {
        err << "error: " << e.what() << '\n';
        return e.code();
    } catch (const CheckpointError& e) {
        err << "error: " << e.what() << '\n';
        return kExitArtifact;
    } catch (const DatasetError& e) {
        err << "error: " << e.what() << '\n';
        return kExitInput;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return kExitInput;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitArtifact;
    }
}

}  // namespace toadhm
