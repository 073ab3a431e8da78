#pragma once

#include <string>

#include "ivpt/array.hpp"

namespace ivpt {

// Encodes a [3,H,W] tensor with values in [0,1] as an 8-bit RGB PNG.
// Out-of-range values are clamped before quantization.
void write_png(const std::string& path, const Array& image);

// Decodes a PNG of any bit depth / color type to [3,H,W] in [0,1].
// Throws std::runtime_error on unreadable or corrupt files.
Array read_png(const std::string& path);

// Minimal NumPy .npy (format 1.0) archive for int64 arrays, C order.
void write_npy_int64(const std::string& path, const IntArray& a);
IntArray read_npy_int64(const std::string& path);

}  // namespace ivpt
