#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "toadhm/conv.hpp"
#include "toadhm/grid.hpp"
#include "toadhm/tensor.hpp"

namespace toadhm {

inline constexpr int kOverallStride = 32;

/// Throws std::invalid_argument unless both extents are positive multiples of 32.
void check_stride_divisible(int height, int width);

/// Per-sample activations kept by a training forward pass.
struct ForwardCache {
    Tensor input;
    std::vector<Tensor> activations;
    std::vector<float> inv_rms;  ///< per-cell scale applied by feature normalization
    std::vector<std::vector<float>> columns;  ///< im2col buffer of each layer's input
    std::vector<float> scratch;
    Tensor grad_output, grad_input;
};

/// Fully-convolutional feature extractor with overall stride 32.
///
/// Any input whose extents are multiples of 32 maps to
/// (H/32) x (W/32) x feature_channels() features.
class Backbone {
public:
    virtual ~Backbone() = default;

    virtual std::unique_ptr<Backbone> clone() const = 0;
    virtual int feature_channels() const = 0;
    virtual std::size_t parameter_count() const = 0;
    virtual std::vector<Parameter*> parameters() = 0;
    virtual std::vector<const Parameter*> parameters() const = 0;
    virtual nlohmann::json describe() const = 0;

    virtual Tensor forward(const Tensor& input) const = 0;
    virtual const Tensor& forward(const Tensor& input, ForwardCache& cache) const = 0;
    /// Accumulates parameter gradients given d(loss)/d(features).
    virtual void backward(ForwardCache& cache, Tensor grad_features) = 0;
};

struct BackboneConfig {
    /// Output channels of each of the five stride-2 stages.
    std::array<int, 5> widths{8, 16, 32, 48, 64};
    /// Extra stride-1 3x3 convolutions appended to each stage.
    std::array<int, 5> extra_convs{0, 0, 0, 1, 1};
    int input_channels = 3;
    std::uint64_t seed = 1;
    /// Scale each output cell's feature vector to unit root-mean-square.
    bool normalize = true;

    void validate() const;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

/// Plain strided convolutional reference backbone (conv3x3 + ReLU stacks).
class ConvBackbone final : public Backbone {
public:
    explicit ConvBackbone(const BackboneConfig& config);

    std::unique_ptr<Backbone> clone() const override { return std::make_unique<ConvBackbone>(*this); }
    int feature_channels() const override { return config_.widths.back(); }
    std::size_t parameter_count() const override;
    std::vector<Parameter*> parameters() override;
    std::vector<const Parameter*> parameters() const override;
    nlohmann::json describe() const override;

    Tensor forward(const Tensor& input) const override;
    const Tensor& forward(const Tensor& input, ForwardCache& cache) const override;
    void backward(ForwardCache& cache, Tensor grad_features) override;

    const BackboneConfig& config() const noexcept { return config_; }
    const std::vector<Conv3x3>& layers() const noexcept { return layers_; }

private:
    BackboneConfig config_;
    std::vector<Conv3x3> layers_;
};

std::unique_ptr<Backbone> build_reference_backbone(const BackboneConfig& config);

/// 1x1 single-filter sigmoid convolution on top of the backbone features.
struct HeatmapHead {
    Parameter weights;
    Parameter bias;

    HeatmapHead() = default;
    HeatmapHead(int feature_channels, float weight_decay);

    int feature_channels() const noexcept { return static_cast<int>(weights.value.size()); }
    std::size_t parameter_count() const noexcept { return weights.value.size() + bias.value.size(); }

    /// Logit at every cell of a (F x h x w) feature tensor.
    Grid<float> logits(const Tensor& features) const;
};

/// Glorot-uniform head: weights ~ U(-L, L), L = sqrt(6 / (F + 1)); zero bias.
HeatmapHead init_head(int feature_channels, std::uint64_t seed, float weight_decay = 1e-5f);

float stable_sigmoid(float logit) noexcept;

/// Per-pixel heat-map network plus the global-max-pool whole-image wrapper.
class HeatmapModel {
public:
    HeatmapModel(std::unique_ptr<Backbone> backbone, HeatmapHead head);
    HeatmapModel(const HeatmapModel& other);
    HeatmapModel& operator=(const HeatmapModel& other);
    HeatmapModel(HeatmapModel&&) noexcept = default;
    HeatmapModel& operator=(HeatmapModel&&) noexcept = default;

    Backbone& backbone() { return *backbone_; }
    const Backbone& backbone() const { return *backbone_; }
    HeatmapHead& head() { return head_; }
    const HeatmapHead& head() const { return head_; }

    std::size_t parameter_count() const { return backbone_->parameter_count() + head_.parameter_count(); }
    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    void zero_grad();

    /// (H/32) x (W/32) grid in (0, 1).
    Heatmap heatmap_forward(const Tensor& image) const;
    /// Global spatial maximum of heatmap_forward.
    float gmp_forward(const Tensor& image) const;

    /// Training forward pass keeping activations for backward().
    Heatmap forward_train(const Tensor& image, ForwardCache& cache) const;
    /// Accumulates gradients given d(loss)/d(heat-map).
    void backward(ForwardCache& cache, const Heatmap& heatmap, const Heatmap& grad_heatmap);

    /// Adds the head's L2 weight-decay gradient and returns the penalty.
    double apply_weight_decay();

private:
    std::unique_ptr<Backbone> backbone_;
    HeatmapHead head_;
};

/// Heat-map of precomputed features: sigmoid(head(features)).
Heatmap apply_head(const HeatmapHead& head, const Tensor& features);

/// Global spatial maximum pooling.
float global_max_pool(const Heatmap& heatmap);

}  // namespace toadhm
