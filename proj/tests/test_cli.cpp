#include <doctest.h>

#include <fstream>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "support.hpp"
#include "toadhm/cli.hpp"

using namespace toadhm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

nlohmann::json tiny_config() {
    return {{"name", "tiny"},
            {"dataset_root", "data/train"},
            {"test_root", "data/test"},
            {"output_dir", "runs"},
            {"synth",
             {{"train_counts", {{"toad", 4}, {"not_toad", 6}}},
              {"test_counts", {{"toad", 2}, {"not_toad", 2}}},
              {"seed", 5},
              {"shape", {96, 128}},
              {"frames_per_clip", 3}}},
            {"augment", {{"crop1", {96, 96}}, {"crop2", {64, 64}}}},
            {"backbone", {{"widths", {4, 4, 4, 4, 4}}, {"extra_convs", {0, 0, 0, 0, 0}}}},
            {"loss", {{"kind", "mse"}}},
            {"train", {{"batch_size", 2}, {"epochs_cap", 2}, {"initial_lr", 1e-3}, {"split_seed", 1}}},
            {"eval", {{"threshold", 0.5}, {"input", {64, 128}}}}};
}

fs::path write_config(const test::TempDir& dir, const nlohmann::json& j, const std::string& name = "run.json") {
    std::ofstream(dir / name) << j.dump(2);
    return dir / name;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("config parsing") {
    test::TempDir dir("cfg");
    SUBCASE("relative paths resolve against the config file") {
        const RunConfig c = load_run_config(write_config(dir, tiny_config()));
        CHECK(c.dataset_root == dir / "data/train");
        CHECK(c.run_dir() == dir / "runs/tiny");
        CHECK(c.test_input == cv::Size(128, 64));
        CHECK(c.train.batch_size == 2);
        const RunConfig back = nlohmann::json(c).get<RunConfig>();
        CHECK(back.synth.train_toad == 4);
        CHECK(back.augment.crop2 == cv::Size(64, 64));
    }
    SUBCASE("unknown keys are rejected") {
        auto j = tiny_config();
        j["extra"] = 1;
        CHECK_THROWS_AS(load_run_config(write_config(dir, j)), CliError);
        j = tiny_config();
        j["synth"]["colour"] = "red";
        CHECK_THROWS_AS(load_run_config(write_config(dir, j)), CliError);
    }
    SUBCASE("invalid values are rejected") {
        auto j = tiny_config();
        j["eval"]["input"] = {70, 128};
        CHECK_THROWS_AS(load_run_config(write_config(dir, j)), CliError);
        j = tiny_config();
        j["loss"] = {{"kind", "mse"}, {"wt", 3}};
        CHECK_THROWS_AS(load_run_config(write_config(dir, j)), CliError);
    }
}

TEST_CASE("synth requires both classes") {
    test::TempDir dir("synth0");
    auto j = tiny_config();
    j["synth"]["train_counts"]["toad"] = 0;
    const Outcome o = cli({"synth", "--config", write_config(dir, j).string()});
    CHECK(o.code == kExitInput);
    CHECK(o.err.find("both classes required") != std::string::npos);
}

TEST_CASE("train reports a missing dataset by path") {
    test::TempDir dir("nodata");
    const Outcome o = cli({"train", "--config", write_config(dir, tiny_config()).string()});
    CHECK(o.code == kExitInput);
    CHECK(o.err.find((dir / "data/train").string()) != std::string::npos);
}

TEST_CASE("usage errors exit with the input code") {
    CHECK(cli({}).code == kExitInput);
    CHECK(cli({"fly"}).code == kExitInput);
    CHECK(cli({"train", "--config", "/nonexistent.json"}).code == kExitInput);
    CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("corrupt and missing checkpoints") {
    test::TempDir dir("badckpt");
    fs::create_directories(dir / "ckpt");
    std::ofstream(dir / "ckpt" / "best.json") << "{\"format\": \"toadhm-checkpoint/1\"}";
    cv::imwrite((dir / "img.png").string(), cv::Mat(704, 1280, CV_8UC3, cv::Scalar::all(9)));
    CHECK(cli({"predict", "--checkpoint", (dir / "ckpt").string(), (dir / "img.png").string()}).code == kExitArtifact);
    CHECK(cli({"eval", "--checkpoint", (dir / "ckpt").string(), "--dataset", dir.path().string()}).code ==
          kExitArtifact);
    CHECK(cli({"predict", "--checkpoint", (dir / "none").string(), (dir / "img.png").string()}).code == kExitInput);
}

TEST_CASE("synth, train, eval and predict end to end") {
    test::TempDir dir("e2e");
    const fs::path cfg = write_config(dir, tiny_config());

    Outcome o = cli({"synth", "--config", cfg.string()});
    REQUIRE_MESSAGE(o.code == kExitOk, o.err);
    const std::string manifest = slurp(dir / "data/train/manifest.json");
    CHECK(nlohmann::json::parse(manifest).at("records").size() == 10);
    CHECK(fs::exists(dir / "data/train/toad/train-toad-000_0042.png"));
    const std::string first_image = slurp(dir / "data/train/toad/train-toad-000_0001.png");

    o = cli({"synth", "--config", cfg.string()});
    REQUIRE(o.code == kExitOk);
    CHECK(slurp(dir / "data/train/manifest.json") == manifest);
    CHECK(slurp(dir / "data/train/toad/train-toad-000_0001.png") == first_image);

    o = cli({"train", "--config", cfg.string(), "--trace"});
    REQUIRE_MESSAGE(o.code == kExitOk, o.err);
    const fs::path run = dir / "runs/tiny";
    CHECK(fs::exists(run / "best.json"));
    CHECK(fs::exists(run / "trace.jsonl"));
    CHECK(fs::exists(run / "config.json"));
    const std::string history = slurp(run / "history.csv");

    o = cli({"train", "--config", cfg.string()});
    REQUIRE(o.code == kExitOk);
    CHECK(slurp(run / "history.csv") == history);

    o = cli({"train", "--config", cfg.string(), "--loss", "weighted_bce", "--wt", "100", "--out",
             (dir / "bce").string()});
    CHECK_MESSAGE(o.code == kExitOk, o.err);
    CHECK(nlohmann::json::parse(slurp(dir / "bce/tiny/config.json")).at("loss").at("kind") == "weighted_bce");

    o = cli({"eval", "--config", cfg.string(), "--overlay-dir", (dir / "overlays").string()});
    REQUIRE_MESSAGE(o.code == kExitOk, o.err);
    const auto report = nlohmann::json::parse(slurp(run / "eval/report.json"));
    for (const char* key : {"recall", "precision", "accuracy", "f_measure"}) CHECK(report.at("metrics").contains(key));
    CHECK(fs::exists(run / "eval/histogram.csv"));
    CHECK(fs::exists(run / "eval/false_negatives.txt"));
    long overlays = 0;
    if (fs::exists(dir / "overlays")) overlays = std::distance(fs::directory_iterator(dir / "overlays"), {});
    CHECK(overlays == report.at("confusion_matrix").at("TP").get<long>());

    const fs::path image = dir / "data/test/toad/test-toad-000_0010.png";
    REQUIRE(fs::exists(image));
    o = cli({"predict", "--config", cfg.string(), "--checkpoint", run.string(), image.string()});
    REQUIRE_MESSAGE(o.code == kExitOk, o.err);
    CHECK(o.out.find("score=") != std::string::npos);
    o = cli({"predict", "--config", cfg.string(), "--checkpoint", run.string(), "--threshold", "1", image.string()});
    CHECK(o.out.rfind("not_toad", 0) == 0);
    o = cli({"predict", "--config", cfg.string(), "--checkpoint", run.string(), "--threshold", "0", image.string()});
    CHECK(o.out.rfind("toad  score=", 0) == 0);
    CHECK(cli({"predict", "--config", cfg.string(), "--checkpoint", run.string(), (dir / "nope.png").string()}).code ==
          kExitInput);

    cv::imwrite((dir / "small.png").string(), cv::Mat(40, 60, CV_8UC3, cv::Scalar::all(50)));
    CHECK(cli({"predict", "--config", cfg.string(), "--checkpoint", run.string(), (dir / "small.png").string()}).code ==
          kExitInput);
    o = cli({"overlay", "--config", cfg.string(), "--checkpoint", run.string(), "--pad", "--out",
             (dir / "ov.png").string(), (dir / "small.png").string()});
    REQUIRE_MESSAGE(o.code == kExitOk, o.err);
    CHECK(cv::imread((dir / "ov.png").string(), cv::IMREAD_UNCHANGED).size() == cv::Size(128, 64));
}

}  // TEST_SUITE
