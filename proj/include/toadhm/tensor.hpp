#pragma once

#include <cstddef>
#include <vector>

namespace toadhm {

/// Dense channel-major (C x H x W) float tensor for a single image.
struct Tensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;

    Tensor() = default;
    Tensor(int c, int h, int w, float fill = 0.0f)
        : channels(c), height(h), width(w),
          data(static_cast<std::size_t>(c) * h * w, fill) {}

    /// Changes the extents, reusing the existing allocation; contents are unspecified.
    void reshape(int c, int h, int w) {
        channels = c;
        height = h;
        width = w;
        data.resize(static_cast<std::size_t>(c) * h * w);
    }

    std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * width; }
    std::size_t size() const noexcept { return data.size(); }

    float* channel(int c) noexcept { return data.data() + c * plane(); }
    const float* channel(int c) const noexcept { return data.data() + c * plane(); }

    float& at(int c, int y, int x) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
    float at(int c, int y, int x) const { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

}  // namespace toadhm
