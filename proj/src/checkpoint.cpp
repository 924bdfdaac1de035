#include "toadhm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "toadhm/rng.hpp"

namespace fs = std::filesystem;

namespace toadhm {

namespace {

constexpr char kMagic[8] = {'T', 'O', 'A', 'D', 'H', 'M', '0', '1'};
constexpr const char* kFormat = "toadhm-checkpoint/1";

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

template <typename T>
void put(std::string& out, const T& value) {
    out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw CheckpointError("truncated weight file");
    T value;
    std::memcpy(&value, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

void write_atomic(const fs::path& path, const std::string& bytes) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError("cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_all(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

fs::path save_checkpoint(const HeatmapModel& model, const fs::path& dir, const std::string& stem,
                         std::uint64_t head_seed, const nlohmann::json& provenance) {
    fs::create_directories(dir);
    std::string blob(kMagic, sizeof kMagic);
    const auto params = model.parameters();
    put(blob, static_cast<std::uint32_t>(params.size()));
    for (const Parameter* p : params) {
        put(blob, static_cast<std::uint32_t>(p->name.size()));
        blob.append(p->name);
        put(blob, static_cast<std::uint64_t>(p->value.size()));
        blob.append(reinterpret_cast<const char*>(p->value.data()), p->value.size() * sizeof(float));
    }

    const fs::path weights = dir / (stem + ".bin");
    const fs::path manifest = dir / (stem + ".json");
    nlohmann::json j{{"format", kFormat},
                     {"backbone", model.backbone().describe()},
                     {"feature_channels", model.head().feature_channels()},
                     {"stride", kOverallStride},
                     {"head_seed", head_seed},
                     {"head_weight_decay", model.head().weights.l2},
                     {"parameter_count", model.parameter_count()},
                     {"weights_file", weights.filename().string()},
                     {"weights_fnv1a", hex64(hash_string(blob))},
                     {"provenance", provenance}};
    write_atomic(weights, blob);
    write_atomic(manifest, j.dump(2) + "\n");
    return manifest;
}

nlohmann::json read_checkpoint_manifest(const fs::path& path) {
    fs::path manifest = path;
    if (fs::is_directory(manifest)) manifest /= "best.json";
    if (!fs::exists(manifest)) throw CheckpointError("checkpoint not found: " + manifest.string());
    auto j = nlohmann::json::parse(read_all(manifest), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw CheckpointError("corrupt checkpoint manifest: " + manifest.string());
    if (j.value("format", "") != kFormat) throw CheckpointError("unsupported checkpoint format: " + manifest.string());
    j["__path"] = manifest.string();
    return j;
}

HeatmapModel load_checkpoint(const fs::path& path) {
    const nlohmann::json j = read_checkpoint_manifest(path);
    const fs::path manifest = j.at("__path").get<std::string>();
    try {
        if (j.at("stride").get<int>() != kOverallStride) throw CheckpointError("unsupported stride");
        const auto& bb = j.at("backbone");
        if (bb.at("type").get<std::string>() != "conv_reference")
            throw CheckpointError("unknown backbone type " + bb.at("type").get<std::string>());
        const BackboneConfig config = bb.at("config").get<BackboneConfig>();
        const int features = j.at("feature_channels").get<int>();
        HeatmapModel model(build_reference_backbone(config),
                           HeatmapHead(features, j.at("head_weight_decay").get<float>()));

        const std::string blob = read_all(manifest.parent_path() / j.at("weights_file").get<std::string>());
        if (hex64(hash_string(blob)) != j.at("weights_fnv1a").get<std::string>())
            throw CheckpointError("weight checksum mismatch");
        if (blob.size() < sizeof kMagic || std::memcmp(blob.data(), kMagic, sizeof kMagic) != 0)
            throw CheckpointError("bad weight file magic");
        std::size_t pos = sizeof kMagic;
        const auto params = model.parameters();
        if (take<std::uint32_t>(blob, pos) != params.size()) throw CheckpointError("parameter count mismatch");
        for (Parameter* p : params) {
            const auto name_len = take<std::uint32_t>(blob, pos);
            if (pos + name_len > blob.size()) throw CheckpointError("truncated weight file");
            const std::string name = blob.substr(pos, name_len);
            pos += name_len;
            if (name != p->name) throw CheckpointError("unexpected parameter " + name + ", wanted " + p->name);
            const auto count = take<std::uint64_t>(blob, pos);
            if (count != p->value.size()) throw CheckpointError("shape mismatch for " + name);
            if (pos + count * sizeof(float) > blob.size()) throw CheckpointError("truncated weight file");
            std::memcpy(p->value.data(), blob.data() + pos, count * sizeof(float));
            pos += count * sizeof(float);
        }
        if (pos != blob.size()) throw CheckpointError("trailing bytes in weight file");
        return model;
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError("corrupt checkpoint " + manifest.string() + ": " + e.what());
    }
}

}  // namespace toadhm
