#include "toadhm/eval.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "toadhm/augment.hpp"
#include "toadhm/parallel.hpp"

namespace fs = std::filesystem;

namespace toadhm {

Prediction predict_image(const HeatmapModel& model, const cv::Mat& bgr, cv::Size input) {
    if (bgr.rows < input.height || bgr.cols < input.width)
        throw std::invalid_argument("image " + shape_string(bgr.rows, bgr.cols) + " is smaller than the " +
                                    shape_string(input.height, input.width) + " test input");
    Prediction out;
    out.heatmap = model.heatmap_forward(prepare_input(bgr, input));
    out.score = global_max_pool(out.heatmap);
    return out;
}

Label classify(double score, double threshold) { return score > threshold ? Label::toad : Label::not_toad; }

ConfusionMatrix confusion(std::span<const Label> predictions, std::span<const Label> labels) {
    if (predictions.size() != labels.size())
        throw std::invalid_argument("confusion: " + std::to_string(predictions.size()) + " predictions vs " +
                                    std::to_string(labels.size()) + " labels");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool actual = labels[i] == Label::toad;
        const bool predicted = predictions[i] == Label::toad;
        if (actual && predicted) ++cm.tp;
        else if (!actual && predicted) ++cm.fp;
        else if (actual) ++cm.fn;
        else ++cm.tn;
    }
    return cm;
}

Metrics metrics(const ConfusionMatrix& cm) {
    if (cm.tp < 0 || cm.fp < 0 || cm.fn < 0 || cm.tn < 0) throw std::invalid_argument("negative confusion counts");
    if (cm.total() == 0) throw std::invalid_argument("metrics of an empty confusion matrix");
    Metrics m;
    const long p = cm.positives(), n = cm.negatives();
    if (p > 0) m.recall = static_cast<double>(cm.tp) / static_cast<double>(p);
    if (cm.tp + cm.fp > 0) m.precision = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fp);
    m.accuracy = static_cast<double>(cm.tp + cm.tn) / static_cast<double>(p + n);
    if (m.recall && m.precision && *m.recall > 0.0 && *m.precision > 0.0)
        m.f_measure = 2.0 / (1.0 / *m.precision + 1.0 / *m.recall);
    return m;
}

nlohmann::json to_json(const ConfusionMatrix& cm) {
    return nlohmann::json{{"TP", cm.tp}, {"FP", cm.fp}, {"FN", cm.fn}, {"TN", cm.tn},
                          {"P", cm.positives()}, {"N", cm.negatives()}};
}

nlohmann::json to_json(const Metrics& m) {
    auto value = [](const std::optional<double>& v) -> nlohmann::json {
        return v ? nlohmann::json(*v) : nlohmann::json("undefined");
    };
    return nlohmann::json{{"recall", value(m.recall)},
                          {"precision", value(m.precision)},
                          {"accuracy", value(m.accuracy)},
                          {"f_measure", value(m.f_measure)}};
}

std::vector<double> score_histogram(std::span<const double> scores, double bin_width) {
    if (!(bin_width > 0.0 && bin_width <= 1.0)) throw std::invalid_argument("histogram bin width must lie in (0, 1]");
    const auto bins = static_cast<std::size_t>(std::llround(1.0 / bin_width));
    std::vector<double> hist(bins, 0.0);
    if (scores.empty()) return hist;
    for (double s : scores) {
        if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("histogram score outside [0, 1]");
        auto bin = static_cast<std::size_t>(std::floor(s / bin_width));
        hist[std::min(bin, bins - 1)] += 1.0;
    }
    for (double& h : hist) h /= static_cast<double>(scores.size());
    return hist;
}

cv::Mat overlay(const Heatmap& heatmap, const cv::Mat& image) {
    if (heatmap.rows() * kOverallStride != image.rows || heatmap.cols() * kOverallStride != image.cols)
        throw std::invalid_argument("overlay: heat-map " + shape_string(heatmap.rows(), heatmap.cols()) +
                                    " does not match image " + shape_string(image.rows, image.cols) + " / 32");
    cv::Mat gray;
    if (image.type() == CV_8UC3) gray = luma(image);
    else if (image.type() == CV_8UC1) image.convertTo(gray, CV_32F);
    else throw std::invalid_argument("overlay expects an 8-bit gray or BGR image");

    const cv::Mat small(heatmap.rows(), heatmap.cols(), CV_32F, const_cast<float*>(heatmap.data()));
    cv::Mat enlarged;
    cv::resize(small, enlarged, image.size(), 0, 0, cv::INTER_LINEAR);
    cv::Mat product = gray.mul(enlarged);
    cv::Mat out;
    product.convertTo(out, CV_8U);  // rounds and saturates to [0, 255]
    return out;
}

// ---------------------------------------------------------------------------

nlohmann::json EvalReport::to_json(const nlohmann::json& provenance) const {
    return nlohmann::json{{"threshold", threshold},
                          {"images", images.size()},
                          {"confusion_matrix", toadhm::to_json(cm)},
                          {"metrics", toadhm::to_json(scores)},
                          {"provenance", provenance}};
}

void EvalReport::write_histogram_csv(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "bin_low,toad_density,nottoad_density\n";
    const double width = 1.0 / static_cast<double>(toad_histogram.size());
    for (std::size_t i = 0; i < toad_histogram.size(); ++i)
        out << std::fixed << std::setprecision(2) << i * width << ',' << std::setprecision(6) << toad_histogram[i]
            << ',' << not_toad_histogram[i] << '\n';
}

void EvalReport::write_id_list(const fs::path& path, Label actual, Label predicted) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& r : images)
        if (r.label == actual && r.predicted == predicted) out << r.id << '\n';
}

EvalReport evaluate_dataset(const HeatmapModel& model, const DatasetManifest& manifest, const EvalOptions& options) {
    if (manifest.empty()) throw std::invalid_argument("evaluation dataset is empty");
    EvalReport report;
    report.threshold = options.threshold;
    if (!options.overlay_dir.empty()) fs::create_directories(options.overlay_dir);

    report.images.resize(manifest.size());
    parallel_for(manifest.size(), resolve_threads(options.threads), [&](std::size_t i) {
        const FrameRecord record = manifest.load(i);
        const Prediction p = predict_image(model, record.image, options.input);
        ImageResult r{record.id(), record.label, p.score, classify(p.score, options.threshold)};
        if (!options.overlay_dir.empty() && r.label == Label::toad && r.predicted == Label::toad) {
            const cv::Mat img = overlay(p.heatmap, center_crop(record.image, options.input));
            const fs::path file = options.overlay_dir / (r.id + ".png");
            if (!cv::imwrite(file.string(), img)) throw std::runtime_error("cannot write " + file.string());
        }
        report.images[i] = std::move(r);
    });

    std::vector<Label> predicted, actual;
    std::vector<double> toad_scores, not_toad_scores;
    for (const ImageResult& r : report.images) {
        predicted.push_back(r.predicted);
        actual.push_back(r.label);
        (r.label == Label::toad ? toad_scores : not_toad_scores).push_back(r.score);
    }
    report.cm = confusion(predicted, actual);
    report.scores = metrics(report.cm);
    report.toad_histogram = score_histogram(toad_scores);
    report.not_toad_histogram = score_histogram(not_toad_scores);
    return report;
}

}  // namespace toadhm
