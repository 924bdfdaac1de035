#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "toadhm/grid.hpp"

namespace toadhm {

enum class LossKind { weighted_bce, mse };

std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& name);

struct LossConfig {
    LossKind kind = LossKind::mse;
    /// Toad-class weight of the cross-entropy; only meaningful for weighted_bce.
    double toad_weight = 100.0;
    /// Probability clamp for the cross-entropy.
    double epsilon = 1e-7;

    static constexpr double kDefaultToadWeight = 100.0;

    void validate() const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

template <typename T>
struct LossValue {
    T loss{};
    Grid<T> grad;  ///< d(loss)/d(prediction); empty unless requested
};

namespace detail {
template <typename T>
void check_shapes(const Grid<T>& y, const Grid<T>& p) {
    if (!y.same_shape(p))
        throw std::invalid_argument("loss shape mismatch: target " + shape_string(y.rows(), y.cols()) +
                                    " vs prediction " + shape_string(p.rows(), p.cols()));
}
}  // namespace detail

/// Mean over cells of -W_t*y*log(p) - (1-y)*log(1-p), p clamped to [eps, 1-eps].
template <typename T>
LossValue<T> weighted_bce(const Grid<T>& y, const Grid<T>& p, double toad_weight, double epsilon = 1e-7,
                          bool with_grad = false) {
    detail::check_shapes(y, p);
    LossValue<T> out;
    if (with_grad) out.grad = Grid<T>(p.rows(), p.cols());
    const std::size_t n = p.size();
    if (n == 0) return out;
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double yi = y.data()[i];
        const double raw = p.data()[i];
        const double pi = std::clamp(raw, epsilon, 1.0 - epsilon);
        total += -toad_weight * yi * std::log(pi) - (1.0 - yi) * std::log(1.0 - pi);
        if (with_grad) {
            const bool clamped = raw < epsilon || raw > 1.0 - epsilon;
            const double g = clamped ? 0.0 : (-toad_weight * yi / pi + (1.0 - yi) / (1.0 - pi));
            out.grad.data()[i] = static_cast<T>(g * inv_n);
        }
    }
    out.loss = static_cast<T>(total * inv_n);
    return out;
}

/// Mean over cells of (y - p)^2.
template <typename T>
LossValue<T> mse(const Grid<T>& y, const Grid<T>& p, bool with_grad = false) {
    detail::check_shapes(y, p);
    LossValue<T> out;
    if (with_grad) out.grad = Grid<T>(p.rows(), p.cols());
    const std::size_t n = p.size();
    if (n == 0) return out;
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(p.data()[i]) - static_cast<double>(y.data()[i]);
        total += d * d;
        if (with_grad) out.grad.data()[i] = static_cast<T>(2.0 * d * inv_n);
    }
    out.loss = static_cast<T>(total * inv_n);
    return out;
}

template <typename T>
LossValue<T> compute_loss(const LossConfig& config, const Grid<T>& y, const Grid<T>& p, bool with_grad = false) {
    switch (config.kind) {
        case LossKind::weighted_bce:
            return weighted_bce(y, p, config.toad_weight, config.epsilon, with_grad);
        case LossKind::mse:
            return mse(y, p, with_grad);
    }
    throw std::logic_error("unknown loss kind");
}

}  // namespace toadhm
