#include "toadhm/augment.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include <opencv2/imgproc.hpp>

#include "toadhm/rng.hpp"

namespace toadhm {

namespace {

constexpr int kBorder = cv::BORDER_REFLECT_101;

cv::Matx33d affine3(const cv::Mat& m2x3) {
    cv::Matx33d out = cv::Matx33d::eye();
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) out(r, c) = m2x3.at<double>(r, c);
    return out;
}

cv::Matx33d translation(double dx, double dy) { return {1, 0, dx, 0, 1, dy, 0, 0, 1}; }

void check_range(const std::array<double, 2>& r, double lo, double hi, const char* what) {
    if (!(r[0] <= r[1]) || r[0] < lo || r[1] > hi)
        throw std::invalid_argument(std::string("augment ") + what + " range must satisfy " + std::to_string(lo) +
                                    " <= lo <= hi <= " + std::to_string(hi));
}

void require_known(const nlohmann::json& j, std::initializer_list<const char*> keys, const char* where) {
    for (const auto& [key, _] : j.items())
        if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; }))
            throw std::invalid_argument(std::string("unknown ") + where + " key: " + key);
}

// Parameters of one run, drawn up front in a fixed order so that changing a
// probability (e.g. forcing the flip) leaves every other draw untouched.
struct Draws {
    int crop1_row = 0, crop1_col = 0;
    double angle = 0.0;
    double shrink_rows = 1.0, shrink_cols = 1.0;
    std::array<cv::Point2f, 4> corner_jitter{};
    bool flip = false;
    int crop2_row = 0, crop2_col = 0;
    double intensity = 1.0;
};

Draws draw(Rng& rng, const AugmentConfig& cfg, cv::Size image) {
    Draws d;
    const int slack1_rows = image.height - cfg.crop1.height;
    const int slack1_cols = image.width - cfg.crop1.width;
    const int slack2_rows = cfg.crop1.height - cfg.crop2.height;
    const int slack2_cols = cfg.crop1.width - cfg.crop2.width;

    const auto r1 = rng.uniform_int(0, slack1_rows);
    const auto c1 = rng.uniform_int(0, slack1_cols);
    const double angle = rng.uniform(cfg.rotation_range[0], cfg.rotation_range[1]);
    const double sy = rng.uniform(cfg.shrink_range[0], cfg.shrink_range[1]);
    const double sx = rng.uniform(cfg.shrink_range[0], cfg.shrink_range[1]);
    for (auto& j : d.corner_jitter) {
        const double jx = rng.uniform(-1.0, 1.0) * cfg.perspective_magnitude * cfg.crop1.width;
        const double jy = rng.uniform(-1.0, 1.0) * cfg.perspective_magnitude * cfg.crop1.height;
        j = cv::Point2f(static_cast<float>(jx), static_cast<float>(jy));
    }
    const bool flip = rng.uniform() < cfg.flip_prob;
    const auto r2 = rng.uniform_int(0, slack2_rows);
    const auto c2 = rng.uniform_int(0, slack2_cols);
    const double s = rng.uniform(cfg.intensity_range[0], cfg.intensity_range[1]);

    if (!cfg.enabled) {
        d.crop1_row = slack1_rows / 2;
        d.crop1_col = slack1_cols / 2;
        d.crop2_row = slack2_rows / 2;
        d.crop2_col = slack2_cols / 2;
        for (auto& j : d.corner_jitter) j = {0.0f, 0.0f};
        return d;
    }
    d.crop1_row = static_cast<int>(r1);
    d.crop1_col = static_cast<int>(c1);
    d.angle = angle;
    d.shrink_rows = sy;
    d.shrink_cols = sx;
    d.flip = flip;
    d.crop2_row = static_cast<int>(r2);
    // The crop column is drawn in the pre-flip frame, so a flipped run keeps
    // the same scene content as its unflipped twin.
    d.crop2_col = flip ? slack2_cols - static_cast<int>(c2) : static_cast<int>(c2);
    d.intensity = s;
    return d;
}

/// A blank mask stays blank under any warp and is left untouched.
void warp_pair(cv::Mat& image, cv::Mat& mask, const cv::Matx33d& h, bool perspective, bool blank) {
    cv::Mat img_out, mask_out;
    if (perspective) {
        cv::warpPerspective(image, img_out, cv::Mat(h), image.size(), cv::INTER_LINEAR, kBorder);
        if (!blank) cv::warpPerspective(mask, mask_out, cv::Mat(h), mask.size(), cv::INTER_NEAREST, kBorder);
    } else {
        const cv::Mat m = cv::Mat(h).rowRange(0, 2);
        cv::warpAffine(image, img_out, m, image.size(), cv::INTER_LINEAR, kBorder);
        if (!blank) cv::warpAffine(mask, mask_out, m, mask.size(), cv::INTER_NEAREST, kBorder);
    }
    image = img_out;
    if (!blank) mask = mask_out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void AugmentConfig::validate() const {
    check_range(rotation_range, -360.0, 360.0, "rotation");
    check_range(shrink_range, 0.9, 1.0, "shrink");
    check_range(intensity_range, 0.75, 1.25, "intensity");
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw std::invalid_argument("augment flip_prob must lie in [0, 1]");
    if (!(perspective_magnitude >= 0.0 && perspective_magnitude <= 0.1))
        throw std::invalid_argument("augment perspective_magnitude must lie in [0, 0.1]");
    if (crop2.width <= 0 || crop2.height <= 0 || crop2.width > crop1.width || crop2.height > crop1.height)
        throw std::invalid_argument("augment crop2 must be positive and fit inside crop1");
    if (crop2.width % 32 != 0 || crop2.height % 32 != 0)
        throw std::invalid_argument("augment crop2 extents must be multiples of 32");
}

void to_json(nlohmann::json& j, const AugmentConfig& c) {
    j = nlohmann::json{{"rotation_range", c.rotation_range},
                       {"shrink_range", c.shrink_range},
                       {"flip_prob", c.flip_prob},
                       {"crop1", {c.crop1.height, c.crop1.width}},
                       {"crop2", {c.crop2.height, c.crop2.width}},
                       {"intensity_range", c.intensity_range},
                       {"perspective_magnitude", c.perspective_magnitude},
                       {"enabled", c.enabled}};
}

void from_json(const nlohmann::json& j, AugmentConfig& c) {
    require_known(j,
                  {"rotation_range", "shrink_range", "flip_prob", "crop1", "crop2", "intensity_range",
                   "perspective_magnitude", "enabled"},
                  "augment");
    auto size_of = [](const nlohmann::json& v) {
        const auto rc = v.get<std::array<int, 2>>();
        return cv::Size(rc[1], rc[0]);
    };
    if (j.contains("rotation_range")) c.rotation_range = j.at("rotation_range").get<std::array<double, 2>>();
    if (j.contains("shrink_range")) c.shrink_range = j.at("shrink_range").get<std::array<double, 2>>();
    if (j.contains("flip_prob")) c.flip_prob = j.at("flip_prob").get<double>();
    if (j.contains("crop1")) c.crop1 = size_of(j.at("crop1"));
    if (j.contains("crop2")) c.crop2 = size_of(j.at("crop2"));
    if (j.contains("intensity_range")) c.intensity_range = j.at("intensity_range").get<std::array<double, 2>>();
    if (j.contains("perspective_magnitude")) c.perspective_magnitude = j.at("perspective_magnitude").get<double>();
    if (j.contains("enabled")) c.enabled = j.at("enabled").get<bool>();
    c.validate();
}

// ---------------------------------------------------------------------------
// Photometric helpers

cv::Mat luma(const cv::Mat& bgr) {
    if (bgr.type() != CV_8UC3) throw std::invalid_argument("luma expects an 8-bit 3-channel image");
    cv::Mat out(bgr.size(), CV_32FC1);
    for (int r = 0; r < bgr.rows; ++r) {
        const auto* px = bgr.ptr<cv::Vec3b>(r);
        float* dst = out.ptr<float>(r);
        for (int c = 0; c < bgr.cols; ++c)
            dst[c] = static_cast<float>(0.299 * px[c][2] + 0.587 * px[c][1] + 0.114 * px[c][0]);
    }
    return out;
}

cv::Mat gray_triple(const cv::Mat& bgr) {
    const cv::Mat y = luma(bgr);
    cv::Mat out;
    cv::merge(std::vector<cv::Mat>{y, y, y}, out);
    return out;
}

cv::Mat flip_horizontal(const cv::Mat& image) {
    cv::Mat out;
    cv::flip(image, out, 1);
    return out;
}

cv::Mat center_crop(const cv::Mat& image, cv::Size crop) {
    if (image.rows < crop.height || image.cols < crop.width)
        throw std::invalid_argument("image " + shape_string(image.rows, image.cols) + " is smaller than crop " +
                                    shape_string(crop.height, crop.width));
    const int r = (image.rows - crop.height) / 2;
    const int c = (image.cols - crop.width) / 2;
    return image(cv::Rect(c, r, crop.width, crop.height));
}

Tensor normalize(const cv::Mat& image, double s) {
    if (image.empty()) throw std::invalid_argument("normalize of an empty image");
    const int channels = image.channels();
    const int depth = image.depth();
    Tensor out(channels, image.rows, image.cols);
    const auto n = static_cast<long long>(image.total()) * channels;

    std::vector<cv::Mat> planes;
    cv::split(image, planes);

    if (depth == CV_8U || depth == CV_16U || depth == CV_16S || depth == CV_32S) {
        // X_i = (I_i * n - sum(I)) / (n * 125.5) * s; the numerator is exact.
        std::vector<cv::Mat> wide(planes.size());
        long long sum = 0;
        for (std::size_t k = 0; k < planes.size(); ++k) {
            planes[k].convertTo(wide[k], CV_32S);
            for (int r = 0; r < image.rows; ++r) {
                const int* p = wide[k].ptr<int>(r);
                for (int c = 0; c < image.cols; ++c) sum += p[c];
            }
        }
        const double denom = static_cast<double>(n) * kPixelScale;
        for (int k = 0; k < channels; ++k) {
            float* dst = out.channel(k);
            for (int r = 0; r < image.rows; ++r) {
                const int* p = wide[k].ptr<int>(r);
                for (int c = 0; c < image.cols; ++c)
                    *dst++ = static_cast<float>(static_cast<double>(p[c] * n - sum) / denom * s);
            }
        }
        return out;
    }

    std::vector<cv::Mat> dbl(planes.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < planes.size(); ++k) {
        planes[k].convertTo(dbl[k], CV_64F);
        sum += cv::sum(dbl[k])[0];
    }
    const double mean = sum / static_cast<double>(n);
    for (int k = 0; k < channels; ++k) {
        float* dst = out.channel(k);
        for (int r = 0; r < image.rows; ++r) {
            const double* p = dbl[k].ptr<double>(r);
            for (int c = 0; c < image.cols; ++c) *dst++ = static_cast<float>((p[c] - mean) / kPixelScale * s);
        }
    }
    return out;
}

Tensor replicate_channels(const Tensor& single, int channels) {
    if (single.channels != 1) throw std::invalid_argument("replicate_channels expects a single-channel tensor");
    Tensor out(channels, single.height, single.width);
    for (int c = 0; c < channels; ++c)
        std::memcpy(out.channel(c), single.data.data(), single.plane() * sizeof(float));
    return out;
}

Tensor prepare_input(const cv::Mat& bgr, cv::Size crop) {
    return replicate_channels(normalize(luma(center_crop(bgr, crop)), 1.0), 3);
}

// ---------------------------------------------------------------------------
// Pipeline

cv::Matx33d compose_geometry(const std::vector<AugmentStep>& trace) {
    cv::Matx33d total = cv::Matx33d::eye();
    for (const auto& step : trace) total = step.transform * total;
    return total;
}

TrainingSample augment_pair(const FrameRecord& record, std::uint64_t seed, const AugmentConfig& config) {
    config.validate();
    if (record.image.empty()) throw std::invalid_argument("augment_pair: empty image");
    if (record.image.rows < config.crop1.height || record.image.cols < config.crop1.width)
        throw std::invalid_argument("augment_pair: image " + shape_string(record.image.rows, record.image.cols) +
                                    " is smaller than crop1 " +
                                    shape_string(config.crop1.height, config.crop1.width));

    Rng rng(hash_values(seed, 0x61756720ULL));
    const Draws d = draw(rng, config, record.image.size());

    TrainingSample sample;
    sample.label = record.label;
    auto& trace = sample.trace;

    // Gray conversion is per pixel, so converting only the crop1 window is exact.
    const cv::Rect window(d.crop1_col, d.crop1_row, config.crop1.width, config.crop1.height);
    cv::Mat image = luma(record.image(window));
    cv::Mat mask = record.mask.empty() ? cv::Mat::zeros(window.size(), CV_8UC1) : record.mask(window).clone();
    const bool blank = cv::countNonZero(mask) == 0;
    trace.push_back({"gray", {{"weights", {0.299, 0.587, 0.114}}}});

    // 1. crop to crop1
    trace.push_back({"crop1", {{"row", d.crop1_row}, {"col", d.crop1_col}}, translation(-d.crop1_col, -d.crop1_row)});

    const double cx = (image.cols - 1) / 2.0;
    const double cy = (image.rows - 1) / 2.0;

    cv::Matx33d geometry = cv::Matx33d::eye();
    bool projective = false;

    // 2. rotation about the canvas centre
    {
        const cv::Matx33d m = affine3(cv::getRotationMatrix2D(cv::Point2f(float(cx), float(cy)), d.angle, 1.0));
        if (d.angle != 0.0) geometry = m * geometry;
        trace.push_back({"rotate", {{"degrees", d.angle}}, d.angle != 0.0 ? m : cv::Matx33d::eye()});
    }

    // 3. independent vertical / horizontal shrink about the centre
    {
        const cv::Matx33d m{d.shrink_cols, 0, cx * (1 - d.shrink_cols), 0, d.shrink_rows, cy * (1 - d.shrink_rows),
                            0, 0, 1};
        const bool identity = d.shrink_rows == 1.0 && d.shrink_cols == 1.0;
        if (!identity) geometry = m * geometry;
        trace.push_back({"shrink", {{"rows", d.shrink_rows}, {"cols", d.shrink_cols}}, identity ? cv::Matx33d::eye() : m});
    }

    // 4. perspective: jitter the four canvas corners
    {
        const float w = static_cast<float>(image.cols - 1), h = static_cast<float>(image.rows - 1);
        const std::array<cv::Point2f, 4> src{cv::Point2f(0, 0), cv::Point2f(w, 0), cv::Point2f(w, h), cv::Point2f(0, h)};
        std::array<cv::Point2f, 4> dst{};
        bool identity = true;
        nlohmann::json corners = nlohmann::json::array();
        for (int i = 0; i < 4; ++i) {
            dst[i] = src[i] + d.corner_jitter[i];
            identity = identity && d.corner_jitter[i] == cv::Point2f(0, 0);
            corners.push_back({d.corner_jitter[i].x, d.corner_jitter[i].y});
        }
        cv::Matx33d m = cv::Matx33d::eye();
        if (!identity) {
            m = cv::Matx33d(cv::getPerspectiveTransform(src.data(), dst.data()));
            geometry = m * geometry;
            projective = true;
        }
        trace.push_back({"perspective", {{"corner_jitter", corners}}, m});
    }

    // Steps 2-4 are resampled once through their composition.
    if (geometry != cv::Matx33d::eye()) warp_pair(image, mask, geometry, projective, blank);

    // 5. horizontal flip
    {
        cv::Matx33d m = cv::Matx33d::eye();
        if (d.flip) {
            image = flip_horizontal(image);
            mask = flip_horizontal(mask);
            m = cv::Matx33d{-1, 0, double(image.cols - 1), 0, 1, 0, 0, 0, 1};
        }
        trace.push_back({"flip", {{"applied", d.flip}}, m});
    }

    // 6. crop to the network input
    image = image(cv::Rect(d.crop2_col, d.crop2_row, config.crop2.width, config.crop2.height)).clone();
    mask = mask(cv::Rect(d.crop2_col, d.crop2_row, config.crop2.width, config.crop2.height)).clone();
    trace.push_back({"crop2", {{"row", d.crop2_row}, {"col", d.crop2_col}}, translation(-d.crop2_col, -d.crop2_row)});

    // 7-9. X = (I / 125.5 - mean) * s
    trace.push_back({"scale", {{"divisor", kPixelScale}}});
    trace.push_back({"mean_subtract", nlohmann::json::object()});
    trace.push_back({"intensity", {{"s", d.intensity}}});
    sample.x = replicate_channels(normalize(image, d.intensity), 3);

    if (!blank) sample.boxes = boxes_from_mask(mask);
    sample.y = target_from_boxes(sample.boxes, mask.rows / 32, mask.cols / 32, 32);
    sample.mask = std::move(mask);
    return sample;
}

}  // namespace toadhm
