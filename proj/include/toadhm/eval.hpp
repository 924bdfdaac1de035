#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "toadhm/data.hpp"
#include "toadhm/grid.hpp"
#include "toadhm/model.hpp"

namespace toadhm {

inline constexpr double kDefaultThreshold = 0.5;

/// Test-time input extent (width x height).
inline const cv::Size kTestInput{1280, 704};

struct Prediction {
    double score = 0.0;  ///< global maximum of the heat-map
    Heatmap heatmap;
};

/// Centre-crop, gray, normalize with s = 1, then heat-map and its spatial maximum.
Prediction predict_image(const HeatmapModel& model, const cv::Mat& bgr, cv::Size input = kTestInput);

/// toad iff score > threshold.
Label classify(double score, double threshold = kDefaultThreshold);

struct ConfusionMatrix {
    long tp = 0;
    long fp = 0;
    long fn = 0;
    long tn = 0;

    long positives() const noexcept { return tp + fn; }
    long negatives() const noexcept { return fp + tn; }
    long total() const noexcept { return tp + fp + fn + tn; }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

ConfusionMatrix confusion(std::span<const Label> predictions, std::span<const Label> labels);

/// Undefined scores are empty optionals (never 0 or NaN).
struct Metrics {
    std::optional<double> recall;
    std::optional<double> precision;
    std::optional<double> accuracy;
    std::optional<double> f_measure;
};

/// recall = TP/P, precision = TP/(TP+FP), accuracy = (TP+TN)/(P+N),
/// F = 2 / (1/precision + 1/recall).
Metrics metrics(const ConfusionMatrix& cm);

nlohmann::json to_json(const ConfusionMatrix& cm);
nlohmann::json to_json(const Metrics& m);

/// Normalized histogram of scores in [0, 1] with 1/bin_width bins; a score of
/// exactly 1 lands in the last bin. Empty input yields all-zero mass.
std::vector<double> score_histogram(std::span<const double> scores, double bin_width = 0.01);

/// Heat-map bilinearly enlarged x32 and multiplied into the gray version of
/// `image`; 8-bit single-channel result.
cv::Mat overlay(const Heatmap& heatmap, const cv::Mat& image);

struct ImageResult {
    std::string id;
    Label label = Label::not_toad;
    double score = 0.0;
    Label predicted = Label::not_toad;
};

struct EvalReport {
    double threshold = kDefaultThreshold;
    std::vector<ImageResult> images;
    ConfusionMatrix cm;
    Metrics scores;
    std::vector<double> toad_histogram;
    std::vector<double> not_toad_histogram;

    nlohmann::json to_json(const nlohmann::json& provenance = nlohmann::json::object()) const;
    /// bin_low,toad_density,nottoad_density
    void write_histogram_csv(const std::filesystem::path& path) const;
    /// One record id per line.
    void write_id_list(const std::filesystem::path& path, Label actual, Label predicted) const;
};

struct EvalOptions {
    double threshold = kDefaultThreshold;
    cv::Size input = kTestInput;
    std::filesystem::path overlay_dir;  ///< one PNG per true positive when set
    int threads = 0;                    ///< image-level workers; 0 uses every hardware thread
};

EvalReport evaluate_dataset(const HeatmapModel& model, const DatasetManifest& manifest, const EvalOptions& options = {});

}  // namespace toadhm
