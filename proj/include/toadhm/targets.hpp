#pragma once

#include <vector>

#include <opencv2/core.hpp>

#include "toadhm/grid.hpp"

namespace toadhm {

/// Axis-aligned box, inclusive pixel indices at full input resolution.
struct BoundingBox {
    int r_min = 0;
    int r_max = 0;
    int c_min = 0;
    int c_max = 0;

    double center_row() const noexcept { return (r_min + r_max) / 2.0; }
    double center_col() const noexcept { return (c_min + c_max) / 2.0; }
    long area() const noexcept { return static_cast<long>(r_max - r_min + 1) * (c_max - c_min + 1); }
    bool contains(double r, double c) const noexcept {
        return r >= r_min && r <= r_max && c >= c_min && c <= c_max;
    }

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Y(r, c) = exp(-(r - r0)^2 / a - (c - c0)^2 / b).
struct GaussianParams {
    double center_row = 0.0;
    double center_col = 0.0;
    double a = 1.0;
    double b = 1.0;
};

/// Smallest half-extent used when fitting a Gaussian to a box.
inline constexpr double kMinHalfExtent = 0.5;

/// One tight box per 4-connected nonzero component, sorted by (r_min, c_min).
std::vector<BoundingBox> boxes_from_mask(const cv::Mat& mask);

/// Gaussian centred on the box whose value drops to 0.5 at the box edges.
GaussianParams gaussian_params(const BoundingBox& box);

double evaluate_gaussian(const GaussianParams& params, double r, double c);

/// Value of the Gaussian for `params` at output cell (i, j) of a stride-`stride` grid.
/// The cell centre maps to full-resolution pixel (stride*i + (stride-1)/2, ...).
double evaluate_at_cell(const GaussianParams& params, int i, int j, int stride);

/// Heat-map target for a list of boxes at (rows x cols) output resolution.
/// Multiple boxes combine by per-cell maximum.
Heatmap target_from_boxes(const std::vector<BoundingBox>& boxes, int rows, int cols, int stride = 32);

/// Heat-map target for an H x W binary mask; H and W must be multiples of 32.
Heatmap target_from_mask(const cv::Mat& mask);

}  // namespace toadhm
