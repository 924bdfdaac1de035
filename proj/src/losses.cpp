#include "toadhm/losses.hpp"

namespace toadhm {

std::string to_string(LossKind kind) {
    switch (kind) {
        case LossKind::weighted_bce: return "weighted_bce";
        case LossKind::mse: return "mse";
    }
    return "unknown";
}

LossKind loss_kind_from_string(const std::string& name) {
    if (name == "weighted_bce" || name == "bce") return LossKind::weighted_bce;
    if (name == "mse") return LossKind::mse;
    throw std::invalid_argument("unknown loss kind: " + name);
}

void LossConfig::validate() const {
    if (!(toad_weight >= 1.0)) throw std::invalid_argument("toad weight W_t must be >= 1");
    if (!(epsilon > 0.0 && epsilon <= 1e-3)) throw std::invalid_argument("loss epsilon must lie in (0, 1e-3]");
    // The Gaussian-target regime trains without class balancing.
    if (kind == LossKind::mse && toad_weight != kDefaultToadWeight)
        throw std::invalid_argument("mse loss takes no class weight; leave W_t at its default");
}

void to_json(nlohmann::json& j, const LossConfig& c) {
    j = nlohmann::json{{"kind", to_string(c.kind)}, {"wt", c.toad_weight}, {"epsilon", c.epsilon}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
    for (const auto& [key, _] : j.items())
        if (key != "kind" && key != "wt" && key != "epsilon")
            throw std::invalid_argument("unknown loss key: " + key);
    if (j.contains("kind")) c.kind = loss_kind_from_string(j.at("kind").get<std::string>());
    if (j.contains("wt")) c.toad_weight = j.at("wt").get<double>();
    if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
    c.validate();
}

}  // namespace toadhm
