#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "toadhm/augment.hpp"
#include "toadhm/data.hpp"
#include "toadhm/model.hpp"
#include "toadhm/train.hpp"

namespace toadhm {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitArtifact = 3;

/// Synthetic dataset block: class counts of the training pool and test split.
struct SynthConfig {
    int train_toad = 66;
    int train_not_toad = 669;
    int test_toad = 200;
    int test_not_toad = 200;
    std::uint64_t seed = 1;
    int height = 720;
    int width = 1280;
    int frames_per_clip = 10;

    void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

struct RunConfig {
    std::string name = "desk";
    std::filesystem::path dataset_root = "data/train";
    std::filesystem::path test_root = "data/test";
    std::filesystem::path output_dir = "runs";
    SynthConfig synth;
    AugmentConfig augment;
    BackboneConfig backbone;
    TrainConfig train;  ///< carries the loss block
    double threshold = 0.5;
    cv::Size test_input{1280, 704};

    std::filesystem::path run_dir() const { return output_dir / name; }
    void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Parses and validates a run config file; relative paths resolve against the file's directory.
RunConfig load_run_config(const std::filesystem::path& path);

/// Error carrying a process exit code.
class CliError : public std::runtime_error {
public:
    CliError(int code, const std::string& message) : std::runtime_error(message), code_(code) {}
    int code() const noexcept { return code_; }

private:
    int code_;
};

/// Writes the training pool and the test split; returns their manifests.
std::pair<DatasetManifest, DatasetManifest> cmd_synth(const RunConfig& config, int threads = 0);

/// `threads` = 0 uses every hardware thread; results do not depend on it.
TrainResult cmd_train(const RunConfig& config, bool trace, std::ostream& log, int threads = 0);

/// Evaluates `checkpoint` on `dataset` and writes report.json, histogram.csv,
/// false_negatives.txt and false_positives.txt into `out_dir`.
nlohmann::json cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
                        const std::filesystem::path& out_dir, double threshold, cv::Size input,
                        const std::filesystem::path& overlay_dir = {}, int threads = 0);

/// Centre-pads with zeros up to `input` when `pad` is set; rejects smaller images otherwise.
cv::Mat read_input_image(const std::filesystem::path& path, cv::Size input, bool pad);

/// Entry point of the command-line tool.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace toadhm
