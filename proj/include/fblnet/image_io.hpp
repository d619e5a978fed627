#pragma once

#include <string>

#include "fblnet/tensor.hpp"

namespace fblnet {

// RGB in [0,1], shape (3,H,W). Grayscale and paletted files are expanded,
// alpha is dropped.
Tensor<float> read_png_rgb(const std::string& path);

// Channel mean of the RGB read, shape (H,W) in [0,1]; exact for files that
// are actually grayscale.
Tensor<float> read_png_gray(const std::string& path);

// 8-bit grayscale; values clamped to [0,1] then scaled to 0..255.
void write_png_gray(const std::string& path, const Tensor<float>& img);

}  // namespace fblnet
