#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

namespace toadhm {

enum class Label { not_toad = 0, toad = 1 };

std::string to_string(Label label);
Label label_from_string(const std::string& name);

/// Error raised for malformed datasets (missing masks, unreadable files, ...).
class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// One labelled frame. Images are 8-bit BGR (OpenCV channel order); the mask
/// is an 8-bit single-channel box mask, present iff the label is toad.
struct FrameRecord {
    std::string clip_id;
    int frame_index = 1;
    cv::Mat image;
    Label label = Label::not_toad;
    cv::Mat mask;

    std::string id() const;
    /// Mask when present, otherwise an all-zero mask of the image shape.
    cv::Mat mask_or_zero() const;
    void validate() const;
};

/// Where a record lives on disk.
struct RecordRef {
    std::string clip_id;
    int frame_index = 1;
    Label label = Label::not_toad;
    std::filesystem::path image_path;
    std::optional<std::filesystem::path> mask_path;

    std::string id() const;
};

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<RecordRef> records;
    std::uint64_t split_seed = 0;

    std::map<Label, std::size_t> counts() const;
    std::size_t size() const noexcept { return records.size(); }
    bool empty() const noexcept { return records.empty(); }

    FrameRecord load(std::size_t index) const;
};

/// Training frames of a clip: 1, 42, 83, ... (every 41st frame from the first).
std::vector<int> extract_training_indices(int n_frames);

/// Test frames of a clip: 10, 19, 28, ... minus any index that is also a training frame.
std::vector<int> extract_test_indices(int n_frames);

/// Deterministic synthetic scene. Toad scenes hold 1-3 squat, warty ellipses
/// whose bounding boxes form the mask; not-toad scenes hold 0-3 distractors
/// (round blotched or elongated striped bodies) and carry no mask.
FrameRecord synth_scene(std::uint64_t seed, Label label, int height = 720, int width = 1280);

/// Record file name stem: <clip>_<frame>, frame zero-padded to four digits.
std::string record_stem(const std::string& clip_id, int frame_index);

/// Scans `<root>/{toad,not_toad}/<clip>_<frame>.png` with masks under `<root>/masks/`.
DatasetManifest load_manifest(const std::filesystem::path& root);

/// Writes one record into the dataset layout under `root`.
RecordRef write_record(const std::filesystem::path& root, const FrameRecord& record);

nlohmann::json manifest_to_json(const DatasetManifest& manifest);
void save_manifest_json(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Reads the width and height from a PNG header without decoding the image.
std::optional<cv::Size> png_size(const std::filesystem::path& path);

}  // namespace toadhm
