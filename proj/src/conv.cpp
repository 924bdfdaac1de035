#include "toadhm/conv.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

#include <Eigen/Core>

namespace toadhm {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

// Valid output-column range [lo, hi) for kernel column kx: 0 <= ox*stride + kx - 1 < width.
inline void valid_range(int kx, int stride, int width, int out_w, int& lo, int& hi) {
    lo = kx >= 1 ? 0 : (1 - kx + stride - 1) / stride;
    hi = std::min(out_w, (width - kx + stride) / stride);
    if (hi < lo) hi = lo;
}

}  // namespace

Conv3x3::Conv3x3(std::string name, int in, int out, int s)
    : in_channels(in), out_channels(out), stride(s),
      weight(name + ".weight", static_cast<std::size_t>(out) * in * 9),
      bias(name + ".bias", static_cast<std::size_t>(out)) {}

void im2col_3x3(const Tensor& input, int stride, int out_h, int out_w, float* col) {
    const int width = input.width;
    const int height = input.height;
    const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
    for (int c = 0; c < input.channels; ++c) {
        const float* src = input.channel(c);
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                float* row = col + ((c * 3 + ky) * 3 + kx) * out_plane;
                int lo, hi;
                valid_range(kx, stride, width, out_w, lo, hi);
                for (int oy = 0; oy < out_h; ++oy) {
                    float* dst = row + static_cast<std::size_t>(oy) * out_w;
                    const int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= height) {
                        std::memset(dst, 0, sizeof(float) * out_w);
                        continue;
                    }
                    const float* line = src + static_cast<std::size_t>(iy) * width + kx - 1;
                    for (int ox = 0; ox < lo; ++ox) dst[ox] = 0.0f;
                    if (stride == 1) {
                        std::memcpy(dst + lo, line + lo, sizeof(float) * (hi - lo));
                    } else {
                        for (int ox = lo; ox < hi; ++ox) dst[ox] = line[ox * stride];
                    }
                    for (int ox = hi; ox < out_w; ++ox) dst[ox] = 0.0f;
                }
            }
        }
    }
}

void col2im_3x3(const float* col, int stride, int out_h, int out_w, Tensor& grad_input) {
    std::fill(grad_input.data.begin(), grad_input.data.end(), 0.0f);
    const int width = grad_input.width;
    const int height = grad_input.height;
    const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
    for (int c = 0; c < grad_input.channels; ++c) {
        float* dst = grad_input.channel(c);
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const float* row = col + ((c * 3 + ky) * 3 + kx) * out_plane;
                int lo, hi;
                valid_range(kx, stride, width, out_w, lo, hi);
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= height) continue;
                    const float* src = row + static_cast<std::size_t>(oy) * out_w;
                    float* line = dst + static_cast<std::size_t>(iy) * width + kx - 1;
                    if (stride == 1) {
                        for (int ox = lo; ox < hi; ++ox) line[ox] += src[ox];
                    } else {
                        for (int ox = lo; ox < hi; ++ox) line[ox * stride] += src[ox];
                    }
                }
            }
        }
    }
}

void Conv3x3::forward(const Tensor& input, Tensor& output, std::vector<float>& col) const {
    const FlushDenormals ftz;
    const int out_h = output_extent(input.height, stride);
    const int out_w = output_extent(input.width, stride);
    const int k = in_channels * 9;
    const int p = out_h * out_w;
    output.reshape(out_channels, out_h, out_w);
    col.resize(static_cast<std::size_t>(k) * p);
    im2col_3x3(input, stride, out_h, out_w, col.data());

    ConstMapMatrix w(weight.value.data(), out_channels, k);
    ConstMapMatrix x(col.data(), k, p);
    MapMatrix y(output.data.data(), out_channels, p);
    y.noalias() = w * x;
    for (int o = 0; o < out_channels; ++o) {
        float* dst = output.channel(o);
        const float b = bias.value[o];
        for (int i = 0; i < p; ++i) dst[i] = std::max(dst[i] + b, 0.0f);
    }
}

void Conv3x3::backward(const Tensor& input, const Tensor& output, const std::vector<float>& col,
                       Tensor& grad_output, Tensor* grad_input, std::vector<float>& scratch) {
    const FlushDenormals ftz;
    const int out_h = output.height;
    const int out_w = output.width;
    const int k = in_channels * 9;
    const int p = out_h * out_w;

    for (std::size_t i = 0; i < grad_output.data.size(); ++i)
        if (output.data[i] <= 0.0f) grad_output.data[i] = 0.0f;

    for (int o = 0; o < out_channels; ++o) {
        const float* g = grad_output.channel(o);
        double acc = 0.0;
        for (int i = 0; i < p; ++i) acc += g[i];
        bias.grad[o] += static_cast<float>(acc);
    }

    if (col.size() != static_cast<std::size_t>(k) * p)
        throw std::invalid_argument("conv backward needs the forward column buffer");
    ConstMapMatrix dy(grad_output.data.data(), out_channels, p);
    {
        ConstMapMatrix x(col.data(), k, p);
        MapMatrix dw(weight.grad.data(), out_channels, k);
        dw.noalias() += dy * x.transpose();
    }
    if (grad_input == nullptr) return;

    ConstMapMatrix w(weight.value.data(), out_channels, k);
    scratch.resize(col.size());
    MapMatrix dx_col(scratch.data(), k, p);
    dx_col.noalias() = w.transpose() * dy;
    grad_input->reshape(in_channels, input.height, input.width);
    col2im_3x3(scratch.data(), stride, out_h, out_w, *grad_input);
}

}  // namespace toadhm
