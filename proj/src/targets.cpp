#include "toadhm/targets.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <tuple>

#include <opencv2/imgproc.hpp>

namespace toadhm {

std::vector<BoundingBox> boxes_from_mask(const cv::Mat& mask) {
    if (mask.empty()) return {};
    if (mask.type() != CV_8UC1) throw std::invalid_argument("mask must be single-channel 8-bit");

    cv::Mat labels, stats, centroids;
    const int n = cv::connectedComponentsWithStats(mask, labels, stats, centroids, 4, CV_32S);
    std::vector<BoundingBox> boxes;
    boxes.reserve(n > 0 ? n - 1 : 0);
    for (int label = 1; label < n; ++label) {
        const int left = stats.at<int>(label, cv::CC_STAT_LEFT);
        const int top = stats.at<int>(label, cv::CC_STAT_TOP);
        const int width = stats.at<int>(label, cv::CC_STAT_WIDTH);
        const int height = stats.at<int>(label, cv::CC_STAT_HEIGHT);
        if (width <= 0 || height <= 0) continue;
        boxes.push_back({top, top + height - 1, left, left + width - 1});
    }
    std::sort(boxes.begin(), boxes.end(), [](const BoundingBox& x, const BoundingBox& y) {
        return std::tie(x.r_min, x.c_min, x.r_max, x.c_max) < std::tie(y.r_min, y.c_min, y.r_max, y.c_max);
    });
    return boxes;
}

GaussianParams gaussian_params(const BoundingBox& box) {
    if (box.r_min > box.r_max || box.c_min > box.c_max)
        throw std::invalid_argument("inverted bounding box");
    GaussianParams p;
    p.center_row = box.center_row();
    p.center_col = box.center_col();
    // -(r_min - r0)^2 / a = ln 0.5  =>  a = (r_min - r0)^2 / ln 2
    const double half_rows = std::max(p.center_row - box.r_min, kMinHalfExtent);
    const double half_cols = std::max(p.center_col - box.c_min, kMinHalfExtent);
    p.a = half_rows * half_rows / std::numbers::ln2;
    p.b = half_cols * half_cols / std::numbers::ln2;
    return p;
}

double evaluate_gaussian(const GaussianParams& params, double r, double c) {
    const double dr = r - params.center_row;
    const double dc = c - params.center_col;
    return std::exp(-dr * dr / params.a - dc * dc / params.b);
}

double evaluate_at_cell(const GaussianParams& params, int i, int j, int stride) {
    const double offset = (stride - 1) / 2.0;
    return evaluate_gaussian(params, static_cast<double>(stride) * i + offset,
                             static_cast<double>(stride) * j + offset);
}

Heatmap target_from_boxes(const std::vector<BoundingBox>& boxes, int rows, int cols, int stride) {
    Heatmap target(rows, cols, 0.0f);
    for (const BoundingBox& box : boxes) {
        const GaussianParams params = gaussian_params(box);
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < cols; ++j) {
                const auto v = static_cast<float>(evaluate_at_cell(params, i, j, stride));
                target(i, j) = std::max(target(i, j), v);
            }
        }
    }
    return target;
}

Heatmap target_from_mask(const cv::Mat& mask) {
    constexpr int stride = 32;
    if (mask.rows <= 0 || mask.cols <= 0 || mask.rows % stride != 0 || mask.cols % stride != 0)
        throw std::invalid_argument("mask shape " + shape_string(mask.rows, mask.cols) +
                                    " is not a positive multiple of 32");
    return target_from_boxes(boxes_from_mask(mask), mask.rows / stride, mask.cols / stride, stride);
}

}  // namespace toadhm
