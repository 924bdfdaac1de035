#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "toadhm/losses.hpp"
#include "toadhm/model.hpp"
#include "toadhm/rng.hpp"

using namespace toadhm;

namespace {

Tensor random_input(Rng& rng, int h, int w, int c = 3) {
    Tensor t(c, h, w);
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return t;
}

HeatmapModel small_model(std::uint64_t seed) {
    BackboneConfig cfg;
    cfg.widths = {4, 6, 8, 8, 10};
    cfg.extra_convs = {0, 1, 0, 0, 1};
    cfg.seed = seed;
    auto backbone = build_reference_backbone(cfg);
    const int f = backbone->feature_channels();
    return HeatmapModel(std::move(backbone), init_head(f, seed + 100));
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("output shapes follow the overall stride") {
    const HeatmapModel model = small_model(1);
    Rng rng(1);
    CHECK(model.heatmap_forward(random_input(rng, 704, 704)).rows() == 22);
    const Heatmap h = model.heatmap_forward(random_input(rng, 704, 1280));
    CHECK(h.rows() == 22);
    CHECK(h.cols() == 40);
    CHECK_THROWS_AS(model.heatmap_forward(random_input(rng, 700, 704)), std::invalid_argument);
    CHECK_THROWS_AS(model.heatmap_forward(random_input(rng, 64, 64, 1)), std::invalid_argument);
}

TEST_CASE("default backbone maps 704x704 to 22x22 features") {
    const auto backbone = build_reference_backbone(BackboneConfig{});
    Rng rng(2);
    const Tensor f = backbone->forward(random_input(rng, 704, 704));
    CHECK(f.channels == backbone->feature_channels());
    CHECK(f.height == 22);
    CHECK(f.width == 22);
}

TEST_CASE("invalid backbone configs are rejected") {
    BackboneConfig c;
    c.widths[2] = 0;
    CHECK_THROWS_AS(build_reference_backbone(c), std::invalid_argument);
    c = BackboneConfig{};
    c.extra_convs[0] = -1;
    CHECK_THROWS_AS(build_reference_backbone(c), std::invalid_argument);
    CHECK_THROWS(nlohmann::json({{"widths", {8, 16, 32, 48, 64}}, {"depth", 3}}).get<BackboneConfig>());
}

TEST_CASE("heat-map values lie in (0, 1) and the pooled score is their maximum") {
    const HeatmapModel model = small_model(3);
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor x = random_input(rng, 96, 128);
        const Heatmap h = model.heatmap_forward(x);
        for (float v : h.values()) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
        CHECK(model.gmp_forward(x) == h.max());
    }
}

TEST_CASE("head initialization") {
    const HeatmapHead head = init_head(64, 9);
    const double limit = std::sqrt(6.0 / 65.0);
    for (float w : head.weights.value) CHECK(std::abs(w) <= limit);
    CHECK(head.bias.value.at(0) == 0.0f);
    CHECK(head.weights.l2 == doctest::Approx(1e-5f));
    CHECK(init_head(64, 9).weights.value == head.weights.value);
    CHECK(init_head(64, 10).weights.value != head.weights.value);
}

TEST_CASE("sigmoid is stable at extreme logits") {
    CHECK(stable_sigmoid(0.0f) == 0.5f);
    CHECK(stable_sigmoid(-1000.0f) >= 0.0f);
    CHECK(stable_sigmoid(1000.0f) <= 1.0f);
    CHECK(std::isfinite(stable_sigmoid(-1000.0f)));
}

TEST_CASE("weight decay adds 2*lambda*w to the head gradient only") {
    HeatmapModel model = small_model(4);
    model.zero_grad();
    const double penalty = model.apply_weight_decay();
    double expected = 0.0;
    for (std::size_t i = 0; i < model.head().weights.value.size(); ++i) {
        const float w = model.head().weights.value[i];
        expected += 1e-5 * w * w;
        CHECK(model.head().weights.grad[i] == doctest::Approx(2e-5 * w));
    }
    CHECK(penalty == doctest::Approx(expected));
    for (const Parameter* p : model.backbone().parameters())
        for (float g : p->grad) CHECK(g == 0.0f);
}

TEST_CASE("backward matches finite differences of the mse loss") {
    HeatmapModel model = small_model(5);
    Rng rng(5);
    const Tensor x = random_input(rng, 32, 64);
    Heatmap y(1, 2);
    for (auto& v : y.values()) v = static_cast<float>(rng.uniform());

    auto loss_of = [&](const HeatmapModel& m) {
        const Heatmap p = m.heatmap_forward(x);
        return mse(y.cast<double>(), p.cast<double>()).loss;
    };

    model.zero_grad();
    ForwardCache cache;
    const Heatmap p = model.forward_train(x, cache);
    const auto g = mse(y, p, true);
    model.backward(cache, p, g.grad);

    // Wide layers cross ReLU kinks at coarse steps and float rounding dominates at
    // fine ones, so the closest of several step sizes is compared.
    auto central = [&](Parameter* param, std::size_t i, float h) {
        const float keep = param->value[i];
        param->value[i] = keep + h;
        const double up = loss_of(model);
        param->value[i] = keep - h;
        const double down = loss_of(model);
        param->value[i] = keep;
        return (up - down) / (2.0 * static_cast<double>(h));
    };
    for (Parameter* param : model.parameters()) {
        for (int k = 0; k < 6; ++k) {
            const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(param->value.size()) - 1));
            const double analytic = param->grad[i];
            double best = std::numeric_limits<double>::infinity();
            for (float h : {2e-3f, 1e-3f, 5e-4f, 2.5e-4f}) best = std::min(best, std::abs(central(param, i, h) - analytic));
            CHECK_MESSAGE(best <= 2e-5 + 0.03 * std::abs(analytic), param->name << "[" << i << "] analytic " << analytic);
        }
    }
}

TEST_CASE("copies are independent") {
    HeatmapModel a = small_model(6);
    HeatmapModel b = a;
    b.head().bias.value[0] = 3.0f;
    b.backbone().parameters()[0]->value[0] += 1.0f;
    CHECK(a.head().bias.value[0] == 0.0f);
    CHECK(a.backbone().parameters()[0]->value[0] != b.backbone().parameters()[0]->value[0]);
}

TEST_CASE("backbone description round-trips its config") {
    BackboneConfig c;
    c.widths = {8, 16, 32, 64, 96};
    const auto backbone = build_reference_backbone(c);
    const auto back = backbone->describe().at("config").get<BackboneConfig>();
    CHECK(back.widths == c.widths);
    CHECK(back.extra_convs == c.extra_convs);
}

}  // TEST_SUITE
