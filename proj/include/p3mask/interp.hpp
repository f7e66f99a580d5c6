#pragma once

// Corner-aligned bilinear interpolation weights, shared by the image-space
// resize and the differentiable graph resize so both produce identical values.

namespace p3mask {

struct AxisTap {
    int i0;      // lower source index
    int i1;      // upper source index (== i0 when the weight w1 is zero)
    double w0;
    double w1;
};

/// Maps output index -> source taps with corners aligned: output index 0 maps
/// to source 0 and output index out_size-1 maps to source in_size-1. When
/// out_size == in_size the mapping is the identity and w1 is exactly zero, so
/// a same-size resize copies values bit-for-bit. out_size == 1 samples source
/// index 0.
inline AxisTap axis_tap(int out_idx, int in_size, int out_size) {
    if (out_size <= 1 || in_size == 1) {
        return {0, 0, 1.0, 0.0};
    }
    const double scale = static_cast<double>(in_size - 1) / static_cast<double>(out_size - 1);
    const double src = static_cast<double>(out_idx) * scale;
    int i0 = static_cast<int>(src);
    if (i0 > in_size - 2) i0 = in_size - 2;
    const double frac = src - static_cast<double>(i0);
    if (frac == 0.0) {
        return {i0, i0, 1.0, 0.0};
    }
    return {i0, i0 + 1, 1.0 - frac, frac};
}

} // namespace p3mask
