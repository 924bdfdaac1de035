#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "toadhm/data.hpp"
#include "toadhm/grid.hpp"
#include "toadhm/targets.hpp"
#include "toadhm/tensor.hpp"

namespace toadhm {

/// Divisor that maps [0, 255] pixel values to [0, ~2].
inline constexpr double kPixelScale = 125.5;

struct AugmentConfig {
    std::array<double, 2> rotation_range{-360.0, 360.0};  ///< degrees
    std::array<double, 2> shrink_range{0.9, 1.0};         ///< per axis
    double flip_prob = 0.5;
    cv::Size crop1{720, 720};  ///< width x height (square by default)
    cv::Size crop2{704, 704};
    std::array<double, 2> intensity_range{0.75, 1.25};
    /// Maximum corner displacement of the perspective warp, as a fraction of the canvas side.
    double perspective_magnitude = 0.05;
    /// When false: centre crops only, no geometry, intensity scale 1.
    bool enabled = true;

    void validate() const;
};

void to_json(nlohmann::json& j, const AugmentConfig& c);
void from_json(const nlohmann::json& j, AugmentConfig& c);

/// One recorded pipeline step. `transform` maps canvas coordinates before the
/// step to canvas coordinates after it (3x3 homography, identity for
/// photometric steps).
struct AugmentStep {
    std::string name;
    nlohmann::json params;
    cv::Matx33d transform = cv::Matx33d::eye();
};

struct TrainingSample {
    Tensor x;     ///< 3 x h x w normalized input
    Heatmap y;    ///< (h/32) x (w/32) target
    Label label = Label::not_toad;
    cv::Mat mask;                     ///< augmented binary mask at input resolution
    std::vector<BoundingBox> boxes;   ///< boxes re-fitted on `mask`
    std::vector<AugmentStep> trace;
};

/// Runs gray conversion, the nine-step augmentation chain and target synthesis.
/// Geometric steps 1-6 act on image and mask alike; steps 7-9 only on the image.
TrainingSample augment_pair(const FrameRecord& record, std::uint64_t seed, const AugmentConfig& config);

/// Composition of all geometric step transforms in a trace (original -> final canvas).
cv::Matx33d compose_geometry(const std::vector<AugmentStep>& trace);

/// X = (I / 125.5 - mean(I / 125.5)) * s, mean over all pixels and channels.
/// Integer-typed inputs (8U/16U/16S/32S) take an exact integer route so that
/// adding a constant to I leaves X bit-identical.
Tensor normalize(const cv::Mat& image, double s);

/// BT.601 luma of an 8-bit BGR image as a single-channel float image.
cv::Mat luma(const cv::Mat& bgr);

/// Three identical float channels holding the luma of `bgr`.
cv::Mat gray_triple(const cv::Mat& bgr);

/// Mirror left-right.
cv::Mat flip_horizontal(const cv::Mat& image);

/// Replicate a single-channel tensor into `channels` identical channels.
Tensor replicate_channels(const Tensor& single, int channels);

/// Test-time input: centre crop to `crop` (height x width), gray, normalize with s = 1.
Tensor prepare_input(const cv::Mat& bgr, cv::Size crop);

/// Centre crop (throws if the image is smaller than `crop`).
cv::Mat center_crop(const cv::Mat& image, cv::Size crop);

}  // namespace toadhm
