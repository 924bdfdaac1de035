#pragma once

#include <filesystem>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "toadhm/model.hpp"

namespace toadhm {

/// Missing, corrupt or inconsistent checkpoint.
class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Writes `<stem>.bin` (raw weights) and `<stem>.json` (manifest) into `dir`.
/// Both files are replaced atomically. Returns the manifest path.
std::filesystem::path save_checkpoint(const HeatmapModel& model, const std::filesystem::path& dir,
                                      const std::string& stem, std::uint64_t head_seed,
                                      const nlohmann::json& provenance = nlohmann::json::object());

/// Loads a model from a checkpoint manifest (`.json`) or its run directory
/// (which must then contain `best.json`).
HeatmapModel load_checkpoint(const std::filesystem::path& path);

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path);

}  // namespace toadhm
