#include "toadhm/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Core>

#include "toadhm/rng.hpp"

namespace toadhm {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;
using ConstMapVector = Eigen::Map<const Eigen::VectorXf>;

void he_uniform(Conv3x3& conv, std::uint64_t seed) {
    Rng rng(seed);
    const double limit = std::sqrt(6.0 / (conv.in_channels * 9.0));
    for (float& w : conv.weight.value) w = static_cast<float>(rng.uniform(-limit, limit));
    std::fill(conv.bias.value.begin(), conv.bias.value.end(), 0.0f);
}

constexpr float kNormEpsilon = 1e-6f;

// Scales every cell's channel vector to unit root-mean-square; returns the scale per cell.
std::vector<float> normalize_cells(Tensor& t) {
    const std::size_t n = t.plane();
    std::vector<double> sq(n, 0.0);
    for (int c = 0; c < t.channels; ++c) {
        const float* x = t.channel(c);
        for (std::size_t i = 0; i < n; ++i) sq[i] += static_cast<double>(x[i]) * x[i];
    }
    std::vector<float> inv(n);
    for (std::size_t i = 0; i < n; ++i)
        inv[i] = static_cast<float>(1.0 / std::sqrt(sq[i] / t.channels + kNormEpsilon));
    for (int c = 0; c < t.channels; ++c) {
        float* x = t.channel(c);
        for (std::size_t i = 0; i < n; ++i) x[i] *= inv[i];
    }
    return inv;
}

// Gradient through normalize_cells given its output y.
void normalize_cells_backward(const Tensor& y, const std::vector<float>& inv, Tensor& grad) {
    const std::size_t n = y.plane();
    std::vector<double> dot(n, 0.0);
    for (int c = 0; c < y.channels; ++c) {
        const float* yc = y.channel(c);
        const float* g = grad.channel(c);
        for (std::size_t i = 0; i < n; ++i) dot[i] += static_cast<double>(g[i]) * yc[i];
    }
    for (int c = 0; c < y.channels; ++c) {
        const float* yc = y.channel(c);
        float* g = grad.channel(c);
        for (std::size_t i = 0; i < n; ++i)
            g[i] = static_cast<float>(inv[i] * (g[i] - yc[i] * dot[i] / y.channels));
    }
}

}  // namespace

void check_stride_divisible(int height, int width) {
    if (height <= 0 || width <= 0 || height % kOverallStride != 0 || width % kOverallStride != 0)
        throw std::invalid_argument("input shape " + shape_string(height, width) +
                                    " is not a positive multiple of " + std::to_string(kOverallStride));
}

// ---------------------------------------------------------------------------
// BackboneConfig

void BackboneConfig::validate() const {
    if (input_channels < 1) throw std::invalid_argument("backbone input_channels must be >= 1");
    for (int w : widths)
        if (w < 1) throw std::invalid_argument("backbone stage widths must be >= 1");
    for (int e : extra_convs)
        if (e < 0) throw std::invalid_argument("backbone extra_convs must be >= 0");
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
    j = nlohmann::json{{"widths", c.widths},
                       {"extra_convs", c.extra_convs},
                       {"input_channels", c.input_channels},
                       {"seed", c.seed},
                       {"normalize", c.normalize}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
    static const std::vector<std::string> known{"widths", "extra_convs", "input_channels", "seed", "normalize"};
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw std::invalid_argument("unknown backbone key: " + key);
    if (j.contains("widths")) c.widths = j.at("widths").get<std::array<int, 5>>();
    if (j.contains("extra_convs")) c.extra_convs = j.at("extra_convs").get<std::array<int, 5>>();
    if (j.contains("input_channels")) c.input_channels = j.at("input_channels").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("normalize")) c.normalize = j.at("normalize").get<bool>();
    c.validate();
}

// ---------------------------------------------------------------------------
// ConvBackbone

ConvBackbone::ConvBackbone(const BackboneConfig& config) : config_(config) {
    config_.validate();
    int in = config_.input_channels;
    for (int stage = 0; stage < 5; ++stage) {
        const int out = config_.widths[stage];
        const std::string prefix = "stage" + std::to_string(stage + 1);
        layers_.emplace_back(prefix + ".down", in, out, 2);
        for (int e = 0; e < config_.extra_convs[stage]; ++e)
            layers_.emplace_back(prefix + ".conv" + std::to_string(e + 1), out, out, 1);
        in = out;
    }
    for (std::size_t i = 0; i < layers_.size(); ++i) he_uniform(layers_[i], hash_values(config_.seed, i));
}

std::size_t ConvBackbone::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.parameter_count();
    return n;
}

std::vector<Parameter*> ConvBackbone::parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    }
    return out;
}

std::vector<const Parameter*> ConvBackbone::parameters() const {
    std::vector<const Parameter*> out;
    for (const auto& l : layers_) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
    }
    return out;
}

nlohmann::json ConvBackbone::describe() const {
    return nlohmann::json{{"type", "conv_reference"},
                          {"config", config_},
                          {"stride", kOverallStride},
                          {"feature_channels", feature_channels()},
                          {"parameter_count", parameter_count()}};
}

Tensor ConvBackbone::forward(const Tensor& input) const {
    check_stride_divisible(input.height, input.width);
    if (input.channels != config_.input_channels)
        throw std::invalid_argument("backbone expects " + std::to_string(config_.input_channels) +
                                    " input channels, got " + std::to_string(input.channels));
    thread_local Tensor a, b;
    thread_local std::vector<float> scratch;
    const Tensor* current = &input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        Tensor& out = (i % 2 == 0) ? a : b;
        layers_[i].forward(*current, out, scratch);
        current = &out;
    }
    Tensor features = *current;
    if (config_.normalize) normalize_cells(features);
    return features;
}

const Tensor& ConvBackbone::forward(const Tensor& input, ForwardCache& cache) const {
    check_stride_divisible(input.height, input.width);
    if (input.channels != config_.input_channels)
        throw std::invalid_argument("backbone expects " + std::to_string(config_.input_channels) +
                                    " input channels, got " + std::to_string(input.channels));
    cache.input = input;
    cache.activations.resize(layers_.size());
    cache.columns.resize(layers_.size());
    const Tensor* current = &cache.input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        layers_[i].forward(*current, cache.activations[i], cache.columns[i]);
        current = &cache.activations[i];
    }
    if (!config_.normalize) return *current;
    cache.activations.push_back(*current);
    cache.inv_rms = normalize_cells(cache.activations.back());
    return cache.activations.back();
}

void ConvBackbone::backward(ForwardCache& cache, Tensor grad) {
    if (config_.normalize) {
        normalize_cells_backward(cache.activations.back(), cache.inv_rms, grad);
        cache.activations.pop_back();
    }
    cache.grad_output = grad;
    for (std::size_t i = layers_.size(); i-- > 0;) {
        const Tensor& input = i == 0 ? cache.input : cache.activations[i - 1];
        layers_[i].backward(input, cache.activations[i], cache.columns[i], cache.grad_output,
                            i == 0 ? nullptr : &cache.grad_input, cache.scratch);
        if (i > 0) std::swap(cache.grad_output, cache.grad_input);
    }
}

std::unique_ptr<Backbone> build_reference_backbone(const BackboneConfig& config) {
    return std::make_unique<ConvBackbone>(config);
}

// ---------------------------------------------------------------------------
// Head

HeatmapHead::HeatmapHead(int feature_channels, float weight_decay)
    : weights("head.weights", static_cast<std::size_t>(feature_channels)), bias("head.bias", 1) {
    if (feature_channels < 1) throw std::invalid_argument("head needs at least one feature channel");
    weights.l2 = weight_decay;
}

Grid<float> HeatmapHead::logits(const Tensor& features) const {
    if (features.channels != feature_channels())
        throw std::invalid_argument("head expects " + std::to_string(feature_channels()) +
                                    " feature channels, got " + std::to_string(features.channels));
    Grid<float> out(features.height, features.width);
    const auto cells = static_cast<Eigen::Index>(features.plane());
    ConstMapMatrix f(features.data.data(), features.channels, cells);
    Eigen::Map<Eigen::Matrix<float, 1, Eigen::Dynamic>> z(out.data(), cells);
    z.noalias() = ConstMapVector(weights.value.data(), features.channels).transpose() * f;
    z.array() += bias.value[0];
    return out;
}

HeatmapHead init_head(int feature_channels, std::uint64_t seed, float weight_decay) {
    HeatmapHead head(feature_channels, weight_decay);
    Rng rng(hash_values(seed, 0x6865616475ULL));
    const double limit = std::sqrt(6.0 / (feature_channels + 1.0));
    for (float& w : head.weights.value) {
        double v;
        do {
            v = rng.uniform(-limit, limit);
        } while (v == -limit);
        w = static_cast<float>(v);
    }
    head.bias.value[0] = 0.0f;
    return head;
}

float stable_sigmoid(float logit) noexcept {
    if (logit >= 0.0f) {
        const float e = std::exp(-logit);
        return 1.0f / (1.0f + e);
    }
    const float e = std::exp(logit);
    return e / (1.0f + e);
}

Heatmap apply_head(const HeatmapHead& head, const Tensor& features) {
    Heatmap h = head.logits(features);
    for (float& v : h.values()) v = stable_sigmoid(v);
    return h;
}

float global_max_pool(const Heatmap& heatmap) { return heatmap.max(); }

// ---------------------------------------------------------------------------
// HeatmapModel

HeatmapModel::HeatmapModel(std::unique_ptr<Backbone> backbone, HeatmapHead head)
    : backbone_(std::move(backbone)), head_(std::move(head)) {
    if (!backbone_) throw std::invalid_argument("null backbone");
    if (backbone_->feature_channels() != head_.feature_channels())
        throw std::invalid_argument("head width does not match backbone feature channels");
}

HeatmapModel::HeatmapModel(const HeatmapModel& other)
    : backbone_(other.backbone_->clone()), head_(other.head_) {}

HeatmapModel& HeatmapModel::operator=(const HeatmapModel& other) {
    if (this != &other) {
        backbone_ = other.backbone_->clone();
        head_ = other.head_;
    }
    return *this;
}

std::vector<Parameter*> HeatmapModel::parameters() {
    auto out = backbone_->parameters();
    out.push_back(&head_.weights);
    out.push_back(&head_.bias);
    return out;
}

std::vector<const Parameter*> HeatmapModel::parameters() const {
    auto out = static_cast<const Backbone&>(*backbone_).parameters();
    out.push_back(&head_.weights);
    out.push_back(&head_.bias);
    return out;
}

void HeatmapModel::zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
}

Heatmap HeatmapModel::heatmap_forward(const Tensor& image) const {
    return apply_head(head_, backbone_->forward(image));
}

float HeatmapModel::gmp_forward(const Tensor& image) const {
    return global_max_pool(heatmap_forward(image));
}

Heatmap HeatmapModel::forward_train(const Tensor& image, ForwardCache& cache) const {
    return apply_head(head_, backbone_->forward(image, cache));
}

void HeatmapModel::backward(ForwardCache& cache, const Heatmap& heatmap, const Heatmap& grad_heatmap) {
    const Tensor& features = cache.activations.back();
    const int channels = features.channels;
    const std::size_t cells = features.plane();
    if (heatmap.size() != cells || grad_heatmap.size() != cells)
        throw std::invalid_argument("heat-map gradient shape mismatch");

    std::vector<float> grad_logit(cells);
    double bias_grad = 0.0;
    for (std::size_t i = 0; i < cells; ++i) {
        const float p = heatmap.data()[i];
        grad_logit[i] = grad_heatmap.data()[i] * p * (1.0f - p);
        bias_grad += grad_logit[i];
    }
    head_.bias.grad[0] += static_cast<float>(bias_grad);

    Tensor grad_features(channels, features.height, features.width);
    for (int c = 0; c < channels; ++c) {
        const float* f = features.channel(c);
        float* g = grad_features.channel(c);
        const float w = head_.weights.value[c];
        double acc = 0.0;
        for (std::size_t i = 0; i < cells; ++i) {
            acc += static_cast<double>(grad_logit[i]) * f[i];
            g[i] = w * grad_logit[i];
        }
        head_.weights.grad[c] += static_cast<float>(acc);
    }
    backbone_->backward(cache, std::move(grad_features));
}

double HeatmapModel::apply_weight_decay() {
    double penalty = 0.0;
    for (Parameter* p : parameters()) {
        if (p->l2 == 0.0f) continue;
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            penalty += static_cast<double>(p->l2) * p->value[i] * p->value[i];
            p->grad[i] += 2.0f * p->l2 * p->value[i];
        }
    }
    return penalty;
}

}  // namespace toadhm
