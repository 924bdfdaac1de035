#include <doctest.h>

#include <cmath>
#include <numeric>

#include "toadhm/augment.hpp"
#include "toadhm/rng.hpp"
#include "toadhm/targets.hpp"

using namespace toadhm;

namespace {

FrameRecord boxed_record(int r, int c, int size) {
    FrameRecord rec;
    rec.clip_id = "aug";
    rec.label = Label::toad;
    rec.image = cv::Mat(720, 1280, CV_8UC3);
    cv::randu(rec.image, 0, 256);
    rec.mask = cv::Mat::zeros(720, 1280, CV_8UC1);
    rec.mask(cv::Rect(c, r, size, size)).setTo(255);
    return rec;
}

double mean_of(const Tensor& t) {
    return std::accumulate(t.data.begin(), t.data.end(), 0.0) / static_cast<double>(t.size());
}

}  // namespace

TEST_SUITE("augment") {

TEST_CASE("samples are a pure function of record, seed and config") {
    const FrameRecord rec = boxed_record(300, 600, 120);
    const AugmentConfig cfg;
    for (std::uint64_t seed : {1u, 2u, 99u}) {
        const TrainingSample a = augment_pair(rec, seed, cfg);
        const TrainingSample b = augment_pair(rec, seed, cfg);
        CHECK(a.x == b.x);
        CHECK(a.y == b.y);
        CHECK(a.boxes == b.boxes);
    }
    CHECK_FALSE(augment_pair(rec, 1, cfg).x == augment_pair(rec, 2, cfg).x);
}

TEST_CASE("sample shapes and trace order") {
    const TrainingSample s = augment_pair(boxed_record(300, 600, 120), 7, AugmentConfig{});
    CHECK(s.x.channels == 3);
    CHECK(s.x.height == 704);
    CHECK(s.x.width == 704);
    CHECK(s.y.rows() == 22);
    CHECK(s.y.cols() == 22);
    std::vector<std::string> names;
    for (const auto& step : s.trace) names.push_back(step.name);
    CHECK(names == std::vector<std::string>{"gray", "crop1", "rotate", "shrink", "perspective", "flip", "crop2",
                                            "scale", "mean_subtract", "intensity"});
    const Tensor& x = s.x;
    CHECK(std::equal(x.channel(0), x.channel(0) + x.plane(), x.channel(1)));
}

TEST_CASE("a forced flip mirrors input and target") {
    const FrameRecord rec = boxed_record(200, 500, 150);
    AugmentConfig flip, keep;
    flip.flip_prob = 1.0;
    keep.flip_prob = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const TrainingSample f = augment_pair(rec, seed, flip);
        const TrainingSample k = augment_pair(rec, seed, keep);
        CHECK(f.y == k.y.flipped_horizontally());
        for (int r = 0; r < 704; r += 37)
            for (int c = 0; c < 704; c += 41) REQUIRE(f.x.at(0, r, c) == k.x.at(0, r, 703 - c));
    }
}

TEST_CASE("flipping twice is the identity") {
    cv::Mat img(5, 7, CV_8UC3);
    cv::randu(img, 0, 256);
    CHECK(cv::norm(flip_horizontal(flip_horizontal(img)), img, cv::NORM_INF) == 0);
}

TEST_CASE("disabled augmentation is a centre crop") {
    const FrameRecord rec = boxed_record(250, 500, 200);
    AugmentConfig cfg;
    cfg.enabled = false;
    const TrainingSample s = augment_pair(rec, 123, cfg);
    CHECK(s.x == prepare_input(rec.image, cfg.crop2));
    CHECK(s.y == target_from_mask(center_crop(rec.mask, cfg.crop2)));
    CHECK(s.trace.at(9).params.at("s") == 1.0);
}

TEST_CASE("records without a toad give an empty target") {
    FrameRecord rec = boxed_record(300, 600, 120);
    rec.label = Label::not_toad;
    rec.mask = cv::Mat();
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const TrainingSample s = augment_pair(rec, seed, AugmentConfig{});
        CHECK(s.boxes.empty());
        CHECK(s.y.max() == 0.0f);
        CHECK(cv::countNonZero(s.mask) == 0);
        CHECK(s.mask.size() == cv::Size(704, 704));
    }
}

TEST_CASE("recorded geometry maps mask pixels onto the augmented mask") {
    const FrameRecord rec = boxed_record(330, 610, 60);
    const cv::Point2d centre(610 + 29.5, 330 + 29.5);
    int inside = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const TrainingSample s = augment_pair(rec, seed, AugmentConfig{});
        const cv::Matx33d h = compose_geometry(s.trace);
        const cv::Vec3d p = h * cv::Vec3d(centre.x, centre.y, 1.0);
        const double x = p[0] / p[2], y = p[1] / p[2];
        if (x < 2 || y < 2 || x > 701 || y > 701) continue;
        ++inside;
        CHECK(s.mask.at<uchar>(static_cast<int>(std::lround(y)), static_cast<int>(std::lround(x))) == 255);
        bool covered = false;
        for (const auto& b : s.boxes) covered = covered || b.contains(y, x);
        CHECK(covered);
    }
    CHECK(inside > 10);
}

TEST_CASE("normalization centres the image") {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        cv::Mat img(32 + trial % 7, 48, CV_8UC1);
        cv::randu(img, 0, 256);
        const Tensor x = normalize(img, rng.uniform(0.75, 1.25));
        CHECK(std::abs(mean_of(x)) < 1e-6);
    }
}

TEST_CASE("an additive offset cancels exactly") {
    cv::Mat img(40, 40, CV_16UC1);
    cv::randu(img, 0, 256);
    cv::Mat shifted = img + 40;
    CHECK(normalize(img, 1.1) == normalize(shifted, 1.1));
    cv::Mat f;
    img.convertTo(f, CV_32F);
    CHECK(std::abs(mean_of(normalize(f, 1.0))) < 1e-6);
}

TEST_CASE("two-pixel image maps to -1 and +1") {
    cv::Mat img = (cv::Mat_<uchar>(1, 2) << 0, 251);
    const Tensor x = normalize(img, 1.0);
    CHECK(x.data[0] == doctest::Approx(-1.0).epsilon(1e-7));
    CHECK(x.data[1] == doctest::Approx(1.0).epsilon(1e-7));
    CHECK(normalize(img, 1.25).data[1] == doctest::Approx(1.25));
}

TEST_CASE("gray conversion uses luma weights") {
    cv::Mat px(1, 1, CV_8UC3, cv::Scalar(30, 20, 10));  // B, G, R
    CHECK(luma(px).at<float>(0, 0) == doctest::Approx(0.299 * 10 + 0.587 * 20 + 0.114 * 30));
    CHECK(luma(px).at<float>(0, 0) == doctest::Approx(18.15).epsilon(1e-6));
    const cv::Mat triple = gray_triple(px);
    CHECK(triple.type() == CV_32FC3);
    CHECK(triple.at<cv::Vec3f>(0, 0)[0] == triple.at<cv::Vec3f>(0, 0)[2]);
}

TEST_CASE("already-gray pixels keep their value") {
    cv::Mat ramp(1, 256, CV_8UC3);
    for (int v = 0; v < 256; ++v) ramp.at<cv::Vec3b>(0, v) = cv::Vec3b::all(static_cast<uchar>(v));
    const cv::Mat g = luma(ramp);
    for (int v = 0; v < 256; ++v) CHECK(g.at<float>(0, v) == doctest::Approx(v).epsilon(1e-6));
}

TEST_CASE("config validation") {
    AugmentConfig c;
    CHECK_NOTHROW(c.validate());
    c.crop2 = cv::Size(700, 704);
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = AugmentConfig{};
    c.crop2 = cv::Size(736, 736);
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = AugmentConfig{};
    c.flip_prob = 1.5;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = AugmentConfig{};
    c.shrink_range = {1.0, 0.9};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    CHECK_THROWS(nlohmann::json({{"flip", 0.5}}).get<AugmentConfig>());
    const auto back = nlohmann::json(AugmentConfig{}).get<AugmentConfig>();
    CHECK(back.crop1 == AugmentConfig{}.crop1);
    CHECK(back.rotation_range == AugmentConfig{}.rotation_range);
}

TEST_CASE("records smaller than the first crop are rejected") {
    FrameRecord r;
    r.clip_id = "small";
    r.image = cv::Mat(100, 100, CV_8UC3, cv::Scalar::all(0));
    CHECK_THROWS_AS(augment_pair(r, 1, AugmentConfig{}), std::invalid_argument);
}

}  // TEST_SUITE
