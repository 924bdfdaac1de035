#pragma once

#include <string>
#include <vector>

#include "toadhm/tensor.hpp"

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace toadhm {

/// Flushes subnormal floats to zero on the calling thread while alive.
class FlushDenormals {
public:
#if defined(__SSE__)
    FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
    ~FlushDenormals() { _mm_setcsr(saved_); }

private:
    unsigned saved_;
#endif
};

/// A trainable array with its gradient accumulator.
struct Parameter {
    std::string name;
    std::vector<float> value;
    std::vector<float> grad;
    /// L2 penalty coefficient; the loss gains coeff * sum(value^2).
    float l2 = 0.0f;

    Parameter() = default;
    Parameter(std::string n, std::size_t size) : name(std::move(n)), value(size, 0.0f), grad(size, 0.0f) {}

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

/// 3x3 convolution with zero padding of one pixel, followed by ReLU.
/// Weights are laid out [out][in][ky][kx].
struct Conv3x3 {
    int in_channels = 0;
    int out_channels = 0;
    int stride = 1;
    Parameter weight;
    Parameter bias;

    Conv3x3() = default;
    Conv3x3(std::string name, int in, int out, int stride);

    std::size_t parameter_count() const { return weight.value.size() + bias.value.size(); }

    static int output_extent(int input, int stride) { return (input + stride - 1) / stride; }

    /// Forward pass; leaves the im2col expansion of `input` in `col`.
    void forward(const Tensor& input, Tensor& output, std::vector<float>& col) const;

    /// Accumulates weight/bias gradients from `grad_output` (gradient wrt the
    /// post-ReLU output, masked here by `output > 0`). `col` must be the buffer
    /// forward() filled for `input`. Writes the input gradient when
    /// `grad_input` is non-null, using `scratch` for its columns.
    void backward(const Tensor& input, const Tensor& output, const std::vector<float>& col, Tensor& grad_output,
                  Tensor* grad_input, std::vector<float>& scratch);
};

void im2col_3x3(const Tensor& input, int stride, int out_h, int out_w, float* col);
void col2im_3x3(const float* col, int stride, int out_h, int out_w, Tensor& grad_input);

}  // namespace toadhm
