#include "toadhm/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "toadhm/rng.hpp"

namespace fs = std::filesystem;

namespace toadhm {

namespace {

constexpr int kTrainingStep = 41;
constexpr int kTestStep = 9;
constexpr int kFirstTestFrame = 10;

bool is_training_frame(int index) { return index >= 1 && (index - 1) % kTrainingStep == 0; }

// ---------------------------------------------------------------------------
// Synthetic scene rendering

struct Body {
    cv::Point2d center;
    double major = 0.0;  // semi-axis along `angle`
    double minor = 0.0;
    double angle = 0.0;  // degrees

    double half_width() const {
        const double t = angle * std::numbers::pi / 180.0;
        return std::sqrt(major * major * std::cos(t) * std::cos(t) + minor * minor * std::sin(t) * std::sin(t));
    }
    double half_height() const {
        const double t = angle * std::numbers::pi / 180.0;
        return std::sqrt(major * major * std::sin(t) * std::sin(t) + minor * minor * std::cos(t) * std::cos(t));
    }
    // Point at normalized body coordinates (u along major, v along minor), |(u,v)| <= 1.
    cv::Point2d at(double u, double v) const {
        const double t = angle * std::numbers::pi / 180.0;
        const double x = u * major, y = v * minor;
        return {center.x + x * std::cos(t) - y * std::sin(t), center.y + x * std::sin(t) + y * std::cos(t)};
    }
};

cv::Scalar shade(double luma, const cv::Vec3d& tint) {
    return cv::Scalar(std::clamp(luma + tint[0], 0.0, 255.0), std::clamp(luma + tint[1], 0.0, 255.0),
                      std::clamp(luma + tint[2], 0.0, 255.0));
}

cv::Point fixed(const cv::Point2d& p) { return {cvRound(p.x * 16.0), cvRound(p.y * 16.0)}; }
cv::Size fixed(double a, double b) { return {cvRound(a * 16.0), cvRound(b * 16.0)}; }

void fill_ellipse(cv::Mat& img, const cv::Point2d& c, double a, double b, double angle, const cv::Scalar& color) {
    cv::ellipse(img, fixed(c), fixed(std::max(a, 0.5), std::max(b, 0.5)), angle, 0, 360, color, cv::FILLED,
                cv::LINE_AA, 4);
}

void render_background(cv::Mat& img, Rng& rng, double scale, bool complex) {
    const int h = img.rows, w = img.cols;
    const double base = rng.uniform(70.0, 170.0);
    const cv::Vec3d tint(rng.uniform(-15, 15), rng.uniform(-15, 15), rng.uniform(-15, 15));

    cv::Mat coarse(5, 8, CV_32F);
    for (int r = 0; r < coarse.rows; ++r)
        for (int c = 0; c < coarse.cols; ++c) coarse.at<float>(r, c) = static_cast<float>(rng.uniform(-25.0, 25.0));
    cv::Mat field;
    cv::resize(coarse, field, img.size(), 0, 0, cv::INTER_CUBIC);
    for (int r = 0; r < h; ++r) {
        auto* px = img.ptr<cv::Vec3b>(r);
        const float* f = field.ptr<float>(r);
        for (int c = 0; c < w; ++c)
            for (int k = 0; k < 3; ++k) px[c][k] = cv::saturate_cast<uchar>(base + tint[k] + f[c]);
    }

    if (!complex) return;
    const double area_scale = static_cast<double>(h) * w / (720.0 * 1280.0);
    const int twigs = static_cast<int>(std::lround(rng.uniform(20, 50) * area_scale));
    for (int i = 0; i < twigs; ++i) {
        const cv::Point2d p(rng.uniform(0, w), rng.uniform(0, h));
        const double len = rng.uniform(25, 70) * scale;
        const double t = rng.uniform(0, std::numbers::pi);
        const cv::Point2d q(p.x + len * std::cos(t), p.y + len * std::sin(t));
        const double luma = base + rng.uniform(-60, 60);
        const int thick = std::max(1, static_cast<int>(std::lround(rng.uniform(2, 4) * scale)));
        cv::line(img, fixed(p), fixed(q), shade(luma, tint), thick, cv::LINE_AA, 4);
    }
    const int pebbles = static_cast<int>(std::lround(rng.uniform(10, 30) * area_scale));
    for (int i = 0; i < pebbles; ++i) {
        const cv::Point2d p(rng.uniform(0, w), rng.uniform(0, h));
        const double r = rng.uniform(6, 14) * scale;
        fill_ellipse(img, p, r, r * rng.uniform(0.6, 1.0), rng.uniform(0, 180),
                     shade(base + rng.uniform(-50, 50), tint));
    }
}

double body_luma(Rng& rng) {
    return rng.uniform(0.0, 1.0) < 0.5 ? rng.uniform(45.0, 95.0) : rng.uniform(150.0, 210.0);
}

void render_toad(cv::Mat& img, const Body& b, Rng& rng, double scale) {
    const double luma = body_luma(rng);
    const cv::Vec3d tint(rng.uniform(-25, -5), rng.uniform(-5, 10), rng.uniform(5, 25));
    fill_ellipse(img, b.center, b.major, b.minor, b.angle, shade(luma, tint));
    // dense small warts over the back
    const int warts = static_cast<int>(b.major * b.minor / (90.0 * scale * scale)) + 6;
    const double wart_sign = luma > 128 ? -1.0 : 1.0;
    for (int i = 0; i < warts; ++i) {
        double u, v;
        do {
            u = rng.uniform(-1, 1);
            v = rng.uniform(-1, 1);
        } while (u * u + v * v > 0.8);
        const double r = std::max(1.2, rng.uniform(2.5, 4.5) * scale);
        const double contrast = rng.uniform(50, 80);
        cv::circle(img, fixed(b.at(u, v)), cvRound(r * 16.0), shade(luma + wart_sign * contrast, tint), cv::FILLED,
                   cv::LINE_AA, 4);
    }
}

void render_round_frog(cv::Mat& img, const Body& b, Rng& rng, double scale) {
    const double luma = body_luma(rng);
    const cv::Vec3d tint(rng.uniform(-10, 10), rng.uniform(5, 25), rng.uniform(-20, 0));
    const double sign = luma > 128 ? -1.0 : 1.0;
    // smooth radial shading
    for (int ring = 0; ring < 6; ++ring) {
        const double f = 1.0 - ring / 6.0;
        fill_ellipse(img, b.center, b.major * f, b.minor * f, b.angle, shade(luma + sign * 6.0 * ring, tint));
    }
    const int blotches = static_cast<int>(rng.uniform_int(2, 5));
    for (int i = 0; i < blotches; ++i) {
        double u, v;
        do {
            u = rng.uniform(-1, 1);
            v = rng.uniform(-1, 1);
        } while (u * u + v * v > 0.5);
        const double r = rng.uniform(7, 12) * scale;
        fill_ellipse(img, b.at(u, v), r, r * rng.uniform(0.6, 1.0), rng.uniform(0, 180),
                     shade(luma + sign * rng.uniform(25, 45), tint));
    }
}

void render_long_frog(cv::Mat& img, const Body& b, Rng& rng, double) {
    const double luma = body_luma(rng);
    const cv::Vec3d tint(rng.uniform(-5, 15), rng.uniform(0, 20), rng.uniform(-20, 0));
    const double sign = luma > 128 ? -1.0 : 1.0;
    fill_ellipse(img, b.center, b.major, b.minor, b.angle, shade(luma, tint));
    // stripes along the body axis
    const int stripes = static_cast<int>(rng.uniform_int(1, 3));
    for (int i = 0; i < stripes; ++i) {
        const double v = stripes == 1 ? 0.0 : -0.5 + i * (1.0 / (stripes - 1));
        const int thick = std::max(1, static_cast<int>(std::lround(b.minor * 0.18)));
        cv::line(img, fixed(b.at(-0.8, v)), fixed(b.at(0.8, v)), shade(luma + sign * rng.uniform(30, 50), tint),
                 thick, cv::LINE_AA, 4);
    }
}

bool overlaps(const Body& b, const std::vector<Body>& placed) {
    for (const Body& o : placed) {
        const double d = cv::norm(b.center - o.center);
        if (d < 0.95 * (b.major + o.major)) return true;
    }
    return false;
}

// Uniform placement keeping the whole body inside the frame; false if no free spot was found.
bool place(Body& b, const std::vector<Body>& placed, Rng& rng, int h, int w) {
    const double hw = b.half_width(), hh = b.half_height();
    if (2 * hw + 4 > w || 2 * hh + 4 > h) return false;
    for (int attempt = 0; attempt < 60; ++attempt) {
        b.center = {rng.uniform(hw + 2, w - hw - 3), rng.uniform(hh + 2, h - hh - 3)};
        if (!overlaps(b, placed)) return true;
    }
    return false;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(Label label) { return label == Label::toad ? "toad" : "not_toad"; }

Label label_from_string(const std::string& name) {
    if (name == "toad") return Label::toad;
    if (name == "not_toad") return Label::not_toad;
    throw std::invalid_argument("unknown label: " + name);
}

std::string record_stem(const std::string& clip_id, int frame_index) {
    char frame[16];
    std::snprintf(frame, sizeof frame, "%04d", frame_index);
    return clip_id + "_" + frame;
}

std::string FrameRecord::id() const { return record_stem(clip_id, frame_index); }
std::string RecordRef::id() const { return record_stem(clip_id, frame_index); }

cv::Mat FrameRecord::mask_or_zero() const {
    if (!mask.empty()) return mask;
    return cv::Mat::zeros(image.size(), CV_8UC1);
}

void FrameRecord::validate() const {
    if (frame_index < 1) throw DatasetError(id() + ": frame index must be >= 1");
    if (image.empty() || image.type() != CV_8UC3) throw DatasetError(id() + ": image must be 8-bit 3-channel");
    if (label == Label::toad) {
        if (mask.empty()) throw DatasetError(id() + ": missing mask for toad record");
    }
    if (!mask.empty()) {
        if (mask.type() != CV_8UC1) throw DatasetError(id() + ": mask must be 8-bit single-channel");
        if (mask.size() != image.size()) throw DatasetError(id() + ": mask shape differs from image shape");
        const bool nonzero = cv::countNonZero(mask) > 0;
        if (nonzero != (label == Label::toad))
            throw DatasetError(id() + (nonzero ? ": not_toad record has a nonzero mask" : ": toad mask is empty"));
    }
}

std::map<Label, std::size_t> DatasetManifest::counts() const {
    std::map<Label, std::size_t> out{{Label::toad, 0}, {Label::not_toad, 0}};
    for (const auto& r : records) ++out[r.label];
    return out;
}

FrameRecord DatasetManifest::load(std::size_t index) const {
    const RecordRef& ref = records.at(index);
    FrameRecord rec;
    rec.clip_id = ref.clip_id;
    rec.frame_index = ref.frame_index;
    rec.label = ref.label;
    rec.image = cv::imread(ref.image_path.string(), cv::IMREAD_COLOR);
    if (rec.image.empty()) throw DatasetError("unreadable image: " + ref.image_path.string());
    if (ref.mask_path) {
        rec.mask = cv::imread(ref.mask_path->string(), cv::IMREAD_GRAYSCALE);
        if (rec.mask.empty()) throw DatasetError("unreadable mask: " + ref.mask_path->string());
        cv::threshold(rec.mask, rec.mask, 127, 255, cv::THRESH_BINARY);
    }
    rec.validate();
    return rec;
}

std::vector<int> extract_training_indices(int n_frames) {
    std::vector<int> out;
    for (int i = 1; i <= n_frames; i += kTrainingStep) out.push_back(i);
    return out;
}

std::vector<int> extract_test_indices(int n_frames) {
    std::vector<int> out;
    for (int i = kFirstTestFrame; i <= n_frames; i += kTestStep)
        if (!is_training_frame(i)) out.push_back(i);
    return out;
}

FrameRecord synth_scene(std::uint64_t seed, Label label, int height, int width) {
    if (height < 64 || width < 64)
        throw std::invalid_argument("synthetic scene must be at least 64x64, got " + std::to_string(height) + "x" +
                                    std::to_string(width));
    Rng rng(hash_values(seed, static_cast<std::uint64_t>(label), 0x7363656e65ULL));
    const double scale = std::min(height, width) / 720.0;

    FrameRecord rec;
    rec.clip_id = "syn" + std::to_string(seed);
    rec.frame_index = 1;
    rec.label = label;
    rec.image = cv::Mat(height, width, CV_8UC3);
    render_background(rec.image, rng, scale, rng.bernoulli(0.5));

    std::vector<Body> placed;
    if (label == Label::toad) {
        rec.mask = cv::Mat::zeros(height, width, CV_8UC1);
        const int count = static_cast<int>(rng.uniform_int(1, 3));
        for (int i = 0; i < count; ++i) {
            Body b;
            b.major = std::max(8.0, rng.uniform(60.0, 90.0) * scale);
            b.minor = std::max(5.0, b.major / rng.uniform(1.3, 1.6));
            b.angle = rng.uniform(0.0, 180.0);
            if (!place(b, placed, rng, height, width)) continue;
            placed.push_back(b);
            render_toad(rec.image, b, rng, scale);
            const int c0 = std::max(0, static_cast<int>(std::floor(b.center.x - b.half_width())));
            const int c1 = std::min(width - 1, static_cast<int>(std::ceil(b.center.x + b.half_width())));
            const int r0 = std::max(0, static_cast<int>(std::floor(b.center.y - b.half_height())));
            const int r1 = std::min(height - 1, static_cast<int>(std::ceil(b.center.y + b.half_height())));
            rec.mask(cv::Range(r0, r1 + 1), cv::Range(c0, c1 + 1)).setTo(255);
        }
        if (placed.empty()) throw std::logic_error("synthetic toad placement failed");
    } else {
        const int count = static_cast<int>(rng.uniform_int(0, 3));
        for (int i = 0; i < count; ++i) {
            Body b;
            const bool round = rng.bernoulli(0.5);
            if (round) {
                b.major = std::max(8.0, rng.uniform(50.0, 85.0) * scale);
                b.minor = b.major / rng.uniform(1.0, 1.12);
            } else {
                b.major = std::max(10.0, rng.uniform(70.0, 100.0) * scale);
                b.minor = std::max(3.0, b.major / rng.uniform(2.3, 3.0));
            }
            b.angle = rng.uniform(0.0, 180.0);
            if (!place(b, placed, rng, height, width)) continue;
            placed.push_back(b);
            if (round)
                render_round_frog(rec.image, b, rng, scale);
            else
                render_long_frog(rec.image, b, rng, scale);
        }
    }

    cv::GaussianBlur(rec.image, rec.image, cv::Size(3, 3), 0.8);
    cv::Mat noise(rec.image.size(), CV_16SC3);
    cv::RNG cvrng(hash_values(seed, 0x6e6f697365ULL));
    cvrng.fill(noise, cv::RNG::NORMAL, 0.0, 3.0);
    cv::Mat img16;
    rec.image.convertTo(img16, CV_16SC3);
    img16 += noise;
    img16.convertTo(rec.image, CV_8UC3);
    return rec;
}

// ---------------------------------------------------------------------------
// On-disk layout

std::optional<cv::Size> png_size(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::array<unsigned char, 24> header{};
    if (!in.read(reinterpret_cast<char*>(header.data()), header.size())) return std::nullopt;
    static constexpr std::array<unsigned char, 8> sig{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    if (!std::equal(sig.begin(), sig.end(), header.begin())) return std::nullopt;
    if (!std::equal(header.begin() + 12, header.begin() + 16, "IHDR")) return std::nullopt;
    auto be32 = [&](int off) {
        return (static_cast<std::uint32_t>(header[off]) << 24) | (static_cast<std::uint32_t>(header[off + 1]) << 16) |
               (static_cast<std::uint32_t>(header[off + 2]) << 8) | header[off + 3];
    };
    const auto w = be32(16), h = be32(20);
    if (w == 0 || h == 0 || w > (1u << 20) || h > (1u << 20)) return std::nullopt;
    return cv::Size(static_cast<int>(w), static_cast<int>(h));
}

namespace {

bool parse_stem(const std::string& stem, std::string& clip, int& frame) {
    const auto pos = stem.rfind('_');
    if (pos == std::string::npos || pos == 0 || pos + 1 >= stem.size()) return false;
    const std::string digits = stem.substr(pos + 1);
    if (!std::all_of(digits.begin(), digits.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) return false;
    if (digits.size() > 9) return false;
    clip = stem.substr(0, pos);
    frame = std::stoi(digits);
    return frame >= 1;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& root) {
    if (!fs::is_directory(root)) throw DatasetError("dataset root is not a directory: " + root.string());
    DatasetManifest manifest;
    manifest.root = root;
    const fs::path mask_dir = root / "masks";
    std::set<std::pair<std::string, int>> seen;

    for (Label label : {Label::toad, Label::not_toad}) {
        const fs::path dir = root / to_string(label);
        if (!fs::exists(dir)) continue;
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
        std::sort(files.begin(), files.end());

        for (const fs::path& file : files) {
            RecordRef ref;
            ref.label = label;
            ref.image_path = file;
            if (!parse_stem(file.stem().string(), ref.clip_id, ref.frame_index))
                throw DatasetError("record name is not <clip>_<frame>.png: " + file.string());
            if (!seen.emplace(ref.clip_id, ref.frame_index).second)
                throw DatasetError("duplicate record (" + ref.clip_id + ", " + std::to_string(ref.frame_index) +
                                   "): " + file.string());
            const auto size = png_size(file);
            if (!size) throw DatasetError("unreadable image: " + file.string());

            const fs::path mask = mask_dir / file.filename();
            if (fs::exists(mask)) {
                const auto msize = png_size(mask);
                if (!msize) throw DatasetError("unreadable mask: " + mask.string());
                if (*msize != *size) throw DatasetError("mask shape differs from image shape: " + mask.string());
                ref.mask_path = mask;
            } else if (label == Label::toad) {
                throw DatasetError("missing mask for toad record: " + file.string());
            }
            manifest.records.push_back(std::move(ref));
        }
    }

    const fs::path cache = root / "manifest.json";
    if (fs::exists(cache)) {
        std::ifstream in(cache);
        const auto j = nlohmann::json::parse(in, nullptr, false);
        if (!j.is_discarded() && j.contains("split_seed")) manifest.split_seed = j.at("split_seed").get<std::uint64_t>();
    }
    return manifest;
}

RecordRef write_record(const fs::path& root, const FrameRecord& record) {
    record.validate();
    const std::string stem = record_stem(record.clip_id, record.frame_index);
    RecordRef ref;
    ref.clip_id = record.clip_id;
    ref.frame_index = record.frame_index;
    ref.label = record.label;
    ref.image_path = root / to_string(record.label) / (stem + ".png");
    fs::create_directories(ref.image_path.parent_path());
    const std::vector<int> params{cv::IMWRITE_PNG_COMPRESSION, 0, cv::IMWRITE_PNG_STRATEGY, cv::IMWRITE_PNG_STRATEGY_RLE};
    if (!cv::imwrite(ref.image_path.string(), record.image, params))
        throw DatasetError("cannot write " + ref.image_path.string());
    if (!record.mask.empty()) {
        ref.mask_path = root / "masks" / (stem + ".png");
        fs::create_directories(ref.mask_path->parent_path());
        if (!cv::imwrite(ref.mask_path->string(), record.mask, params))
            throw DatasetError("cannot write " + ref.mask_path->string());
    }
    return ref;
}

nlohmann::json manifest_to_json(const DatasetManifest& manifest) {
    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : manifest.records) {
        nlohmann::json item{{"clip_id", r.clip_id},
                            {"frame_index", r.frame_index},
                            {"label", to_string(r.label)},
                            {"image", fs::relative(r.image_path, manifest.root).generic_string()}};
        if (r.mask_path) item["mask"] = fs::relative(*r.mask_path, manifest.root).generic_string();
        records.push_back(std::move(item));
    }
    const auto counts = manifest.counts();
    return nlohmann::json{{"split_seed", manifest.split_seed},
                          {"counts", {{"toad", counts.at(Label::toad)}, {"not_toad", counts.at(Label::not_toad)}}},
                          {"records", std::move(records)}};
}

void save_manifest_json(const DatasetManifest& manifest, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw DatasetError("cannot write " + path.string());
    out << manifest_to_json(manifest).dump(2) << '\n';
    if (!out) throw DatasetError("cannot write " + path.string());
}

}  // namespace toadhm
